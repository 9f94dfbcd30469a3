#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapmerge/merge_methods.hpp"

namespace tapmerge {

enum class Metric { l1, l2, cosine };

std::string_view metric_name(Metric m);
Metric parse_metric(std::string_view name);

// Defaults used whenever the caller does not choose: l2 distance on 128
// samples per task.
inline constexpr Metric kDefaultMetric = Metric::l2;
inline constexpr std::size_t kDefaultSamples = 128;

enum class FeatureSource { toy_encoder, external_provider };

/// N x D encoder outputs for one task's sample set.
struct FeatureSet {
    std::string task_id;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;  // row-major
    FeatureSource source = FeatureSource::toy_encoder;
    std::uint64_t sample_digest = 0;

    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

/// Throws unless rows, cols >= 1, sizes agree and all values are finite.
void check_feature_set(const FeatureSet& f);

/// Throws SchemaMismatch unless task, N, D and sample digest all agree.
void check_comparable(const FeatureSet& a, const FeatureSet& b);

/// Digest of (task id, sample indices) identifying a sample selection.
std::uint64_t sample_digest(const std::string& task_id, std::span<const std::size_t> indices);

double dissimilarity(std::span<const float> f, std::span<const float> g, Metric metric);

/// Mean row-wise dissimilarity, summed in row order.
double tap_task(const FeatureSet& merged, const FeatureSet& teacher, Metric metric);

/// Unweighted mean over tasks in sorted task-id order.
double tap_average(const std::map<std::string, double>& per_task);

struct TapReport {
    std::map<std::string, double> per_task;
    double average = 0.0;
    Metric metric = kDefaultMetric;
    std::size_t n_samples = 0;
};

/// Scores `merged` against `teachers`, matched by task id.
TapReport tap_report(const std::vector<FeatureSet>& merged, const std::vector<FeatureSet>& teachers, Metric metric);

nlohmann::json tap_report_to_json(const TapReport& r);

struct Candidate {
    MergeSpec spec;
    TapReport tap;
};

/// Index of the minimal average TAP; ties resolve to the earliest entry.
std::size_t select_index(std::span<const double> averages);
MergeSpec select(const std::vector<Candidate>& candidates);

// FTS1 container: "FTS1", u32 N, u32 D, u64 sample digest, N*D f32, all
// little-endian. The task id is not stored and is supplied by the reader.
std::vector<std::uint8_t> encode_features(const FeatureSet& f);
FeatureSet decode_features(std::span<const std::uint8_t> bytes, std::string task_id,
                           FeatureSource source = FeatureSource::external_provider,
                           const std::string& origin = "<memory>");
void save_features(const FeatureSet& f, const std::filesystem::path& path);
FeatureSet load_features(const std::filesystem::path& path, std::string task_id,
                         FeatureSource source = FeatureSource::external_provider);

}  // namespace tapmerge
