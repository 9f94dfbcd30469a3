#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tapmerge {

// 64-bit FNV-1a. Used for schema and sample digests.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> bytes);
    void update(std::string_view text);
    void update_u64(std::uint64_t value);  // little-endian bytes
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Counter-based generator: the n-th draw of a stream is a pure function of
// (key, n), so streams can be forked by label without shared state.
// Distributions are implemented here (not <random>) so sequences are
// identical across standard libraries.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}
    CounterRng(std::uint64_t seed, std::string_view label);

    std::uint64_t next_u64();
    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);    // [lo, hi)
    double normal();                         // standard normal, Box-Muller
    std::size_t below(std::size_t n);        // uniform integer in [0, n)
    CounterRng fork(std::string_view label) const;

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Fisher-Yates permutation of 0..n-1 driven by `rng`.
std::vector<std::size_t> permutation(std::size_t n, CounterRng& rng);

// Little-endian scalar codecs for the binary containers.
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::uint32_t get_u32(const std::uint8_t* p);
std::uint64_t get_u64(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Writes via a sibling temporary file followed by rename, so readers never
// observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

// Shortest round-trip decimal representation, locale independent.
std::string format_double(double v);

}  // namespace tapmerge
