#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tapmerge {

/// Dense row-major f32 tensor.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> shape_, std::vector<float> data_);
    static Tensor zeros(std::vector<std::int64_t> shape_);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_matrix() const { return shape.size() == 2; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Product of the dimensions; throws on non-positive dims or overflow.
std::size_t shape_numel(std::span<const std::int64_t> shape);
std::string shape_string(std::span<const std::int64_t> shape);

/// Parameter name -> tensor, iterated in lexicographic name order.
using WeightMap = std::map<std::string, Tensor>;

/// Ordered (name, shape) pairs plus a 64-bit digest of their serialization.
/// Two maps can be merged iff their digests compare equal.
struct SchemaDigest {
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> pairs;
    std::uint64_t hash = 0;

    friend bool operator==(const SchemaDigest& a, const SchemaDigest& b) {
        return a.hash == b.hash && a.pairs == b.pairs;
    }
};

SchemaDigest schema_of(const WeightMap& map);

/// Checks names, shape/data consistency and finiteness. Throws FormatError
/// or NumericalError naming the offending parameter.
void check_weight_map(const WeightMap& map);

WeightMap load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const WeightMap& map, const std::filesystem::path& path);

// In-memory codec behind load/save. `origin` only labels error messages.
WeightMap decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_checkpoint(const WeightMap& map);

/// Returns the shared schema of `maps`; throws SchemaMismatch naming the
/// first differing parameter otherwise.
SchemaDigest validate_compat(std::span<const WeightMap* const> maps);
SchemaDigest validate_compat(std::initializer_list<const WeightMap*> maps);

// Elementwise helpers over maps with equal schemas. Arithmetic is carried
// out in double and rounded once per element.
WeightMap add(const WeightMap& a, const WeightMap& b);
WeightMap subtract(const WeightMap& a, const WeightMap& b);
WeightMap scale(const WeightMap& m, double factor);
/// a*x + b*y
WeightMap linear_combination(double a, const WeightMap& x, double b, const WeightMap& y);
WeightMap zeros_like(const WeightMap& m);

/// Sum of squares over every entry, accumulated in name order.
double squared_norm(const WeightMap& m);

}  // namespace tapmerge
