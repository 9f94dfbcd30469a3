#include "tapmerge/tap.hpp"

#include <cmath>
#include <limits>

#include "tapmerge/error.hpp"
#include "tapmerge/util.hpp"

namespace tapmerge {

namespace {
constexpr char kFeatureMagic[4] = {'F', 'T', 'S', '1'};
constexpr std::size_t kFeatureHeader = 4 + 4 + 4 + 8;
}  // namespace

std::string_view metric_name(Metric m) {
    switch (m) {
        case Metric::l1: return "l1";
        case Metric::l2: return "l2";
        case Metric::cosine: return "cosine";
    }
    return "?";
}

Metric parse_metric(std::string_view name) {
    if (name == "l1") return Metric::l1;
    if (name == "l2") return Metric::l2;
    if (name == "cosine") return Metric::cosine;
    throw InvalidArgument("unknown metric '" + std::string(name) + "' (expected l1, l2 or cosine)");
}

void check_feature_set(const FeatureSet& f) {
    if (f.rows == 0 || f.cols == 0) throw FormatError("feature set '" + f.task_id + "' is empty");
    if (f.data.size() != f.rows * f.cols)
        throw FormatError("feature set '" + f.task_id + "' has inconsistent size");
    for (std::size_t i = 0; i < f.data.size(); ++i)
        if (!std::isfinite(f.data[i]))
            throw NumericalError("non-finite feature in '" + f.task_id + "' at row " + std::to_string(i / f.cols));
}

void check_comparable(const FeatureSet& a, const FeatureSet& b) {
    if (a.task_id != b.task_id)
        throw SchemaMismatch("feature sets belong to different tasks ('" + a.task_id + "' vs '" + b.task_id + "')");
    if (a.rows != b.rows || a.cols != b.cols)
        throw SchemaMismatch("feature sets for '" + a.task_id + "' differ in shape: " + std::to_string(a.rows) + "x" +
                             std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    if (a.sample_digest != b.sample_digest)
        throw SchemaMismatch("feature sets for '" + a.task_id + "' were computed on different samples");
}

std::uint64_t sample_digest(const std::string& task_id, std::span<const std::size_t> indices) {
    Fnv1a h;
    h.update_u64(task_id.size());
    h.update(task_id);
    h.update_u64(indices.size());
    for (auto i : indices) h.update_u64(i);
    return h.digest();
}

double dissimilarity(std::span<const float> f, std::span<const float> g, Metric metric) {
    if (f.size() != g.size())
        throw InvalidArgument("dissimilarity: length mismatch " + std::to_string(f.size()) + " vs " +
                              std::to_string(g.size()));
    switch (metric) {
        case Metric::l1: {
            double s = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) s += std::fabs(double(f[i]) - double(g[i]));
            return s;
        }
        case Metric::l2: {
            double s = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double d = double(f[i]) - double(g[i]);
                s += d * d;
            }
            return std::sqrt(s);
        }
        case Metric::cosine: {
            double fg = 0.0, ff = 0.0, gg = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                fg += double(f[i]) * double(g[i]);
                ff += double(f[i]) * double(f[i]);
                gg += double(g[i]) * double(g[i]);
            }
            if (ff == 0.0 || gg == 0.0) throw NumericalError("cosine dissimilarity of a zero vector");
            // Identical inputs give exactly 0.
            if (std::equal(f.begin(), f.end(), g.begin())) return 0.0;
            const double c = fg / (std::sqrt(ff) * std::sqrt(gg));
            return std::max(0.0, 1.0 - std::clamp(c, -1.0, 1.0));
        }
    }
    throw InvalidArgument("unknown metric");
}

double tap_task(const FeatureSet& merged, const FeatureSet& teacher, Metric metric) {
    check_feature_set(merged);
    check_feature_set(teacher);
    check_comparable(merged, teacher);
    double s = 0.0;
    for (std::size_t i = 0; i < merged.rows; ++i) s += dissimilarity(merged.row(i), teacher.row(i), metric);
    return s / static_cast<double>(merged.rows);
}

double tap_average(const std::map<std::string, double>& per_task) {
    if (per_task.empty()) throw InvalidArgument("tap_average: no tasks");
    double s = 0.0;
    for (const auto& [task, v] : per_task) s += v;
    return s / static_cast<double>(per_task.size());
}

TapReport tap_report(const std::vector<FeatureSet>& merged, const std::vector<FeatureSet>& teachers, Metric metric) {
    if (merged.empty()) throw InvalidArgument("tap_report: no feature sets");
    std::map<std::string, const FeatureSet*> by_task;
    for (const auto& t : teachers) by_task[t.task_id] = &t;
    TapReport r;
    r.metric = metric;
    r.n_samples = merged.front().rows;
    for (const auto& m : merged) {
        const auto it = by_task.find(m.task_id);
        if (it == by_task.end()) throw SchemaMismatch("no teacher features for task '" + m.task_id + "'");
        r.per_task[m.task_id] = tap_task(m, *it->second, metric);
    }
    r.average = tap_average(r.per_task);
    return r;
}

nlohmann::json tap_report_to_json(const TapReport& r) {
    nlohmann::json per_task = nlohmann::json::object();
    for (const auto& [task, v] : r.per_task) per_task[task] = v;
    return {{"metric", metric_name(r.metric)}, {"n_samples", r.n_samples}, {"per_task", per_task}, {"average", r.average}};
}

std::size_t select_index(std::span<const double> averages) {
    if (averages.empty()) throw InvalidArgument("select: no candidates");
    std::size_t best = 0;
    for (std::size_t i = 1; i < averages.size(); ++i)
        if (averages[i] < averages[best]) best = i;
    return best;
}

MergeSpec select(const std::vector<Candidate>& candidates) {
    std::vector<double> avg;
    for (const auto& c : candidates) avg.push_back(c.tap.average);
    return candidates.at(select_index(avg)).spec;
}

std::vector<std::uint8_t> encode_features(const FeatureSet& f) {
    check_feature_set(f);
    if (f.rows > std::numeric_limits<std::uint32_t>::max() || f.cols > std::numeric_limits<std::uint32_t>::max())
        throw FormatError("feature matrix too large for FTS1");
    std::vector<std::uint8_t> out(std::begin(kFeatureMagic), std::end(kFeatureMagic));
    out.reserve(kFeatureHeader + 4 * f.data.size());
    put_u32(out, static_cast<std::uint32_t>(f.rows));
    put_u32(out, static_cast<std::uint32_t>(f.cols));
    put_u64(out, f.sample_digest);
    for (float v : f.data) put_f32(out, v);
    return out;
}

FeatureSet decode_features(std::span<const std::uint8_t> bytes, std::string task_id, FeatureSource source,
                           const std::string& origin) {
    if (bytes.size() < kFeatureHeader || !std::equal(std::begin(kFeatureMagic), std::end(kFeatureMagic), bytes.begin()))
        throw FormatError(origin + ": missing FTS1 magic");
    FeatureSet f;
    f.task_id = std::move(task_id);
    f.source = source;
    f.rows = get_u32(bytes.data() + 4);
    f.cols = get_u32(bytes.data() + 8);
    f.sample_digest = get_u64(bytes.data() + 12);
    const std::uint64_t expected = 4ULL * f.rows * f.cols;
    if (bytes.size() - kFeatureHeader != expected)
        throw FormatError(origin + ": expected " + std::to_string(expected) + " payload bytes, found " +
                          std::to_string(bytes.size() - kFeatureHeader));
    f.data.resize(f.rows * f.cols);
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = get_f32(bytes.data() + kFeatureHeader + 4 * i);
    check_feature_set(f);
    return f;
}

void save_features(const FeatureSet& f, const std::filesystem::path& path) {
    write_file_atomic(path, encode_features(f));
}

FeatureSet load_features(const std::filesystem::path& path, std::string task_id, FeatureSource source) {
    return decode_features(read_file(path), std::move(task_id), source, path.string());
}

}  // namespace tapmerge
