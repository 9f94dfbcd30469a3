#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapmerge/merge_methods.hpp"
#include "tapmerge/tap.hpp"
#include "tapmerge/toy_bench.hpp"

namespace tapmerge {

enum class EvalMode { tap_only, tap_and_eval };

std::string_view eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(std::string_view name);

struct SweepConfig {
    MergeMethod method = MergeMethod::ta;
    std::vector<double> lambdas;
    // Transform hyperparameter grids keyed by their merge-spec name
    // ("keep_fraction", "energy_fraction", ...).
    std::map<std::string, std::vector<nlohmann::json>> mu_grid;
    Metric metric = kDefaultMetric;
    std::size_t n_samples = kDefaultSamples;
    std::uint64_t seed = 0;
    EvalMode eval_mode = EvalMode::tap_only;
    std::size_t max_candidates = 4096;
};

// {"method": "ta", "grid": {"lambda": [...], "<mu key>": [...]}, "metric": "l2",
//  "n_samples": 128, "seed": 0, "eval_mode": "tap_only", "max_candidates": 4096}
// Only "method" and "grid.lambda" are required.
SweepConfig sweep_config_from_json(const nlohmann::json& j);
nlohmann::json sweep_config_to_json(const SweepConfig& c);

/// Cartesian product of the grid, lambda outermost, then mu keys in sorted
/// order, each axis in the order given.
std::vector<MergeSpec> generate_grid(const SweepConfig& config);

/// Produces encoder features for the TAP computation. Implementations must
/// allow concurrent calls to `merged`.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual std::vector<std::string> task_ids() const = 0;
    virtual FeatureSet teacher(const std::string& task_id) = 0;
    virtual FeatureSet merged(const WeightMap& weights, const std::string& task_id, std::size_t candidate) = 0;
    /// Encoder forward passes issued so far (one per sample row).
    std::uint64_t forward_passes() const { return passes_.load(); }

protected:
    void count(std::size_t rows) { passes_ += rows; }

private:
    std::atomic<std::uint64_t> passes_{0};
};

/// In-process toy encoder on the first n rows of each task's seeded sample
/// permutation. Teacher features are computed on first use and cached.
class ToyFeatureProvider : public FeatureProvider {
public:
    ToyFeatureProvider(const toy::Bench& bench, std::size_t n_samples, std::uint64_t seed);
    std::vector<std::string> task_ids() const override;
    FeatureSet teacher(const std::string& task_id) override;
    FeatureSet merged(const WeightMap& weights, const std::string& task_id, std::size_t candidate) override;

private:
    struct Entry {
        Eigen::MatrixXd x;
        std::uint64_t digest = 0;
        const WeightMap* finetuned = nullptr;
        std::optional<FeatureSet> teacher;
    };
    const Entry& entry(const std::string& task_id) const;
    std::map<std::string, Entry> entries_;
};

/// Runs an external executable as `exe <checkpoint> <samples> <features>`.
/// Checkpoints and sample files are written below `work_dir`; a nonzero exit
/// status or a malformed feature file is an error.
class ExternalFeatureProvider : public FeatureProvider {
public:
    struct TaskInputs {
        std::filesystem::path teacher_checkpoint;
        std::filesystem::path samples;  // FTS1 input rows
    };
    ExternalFeatureProvider(std::filesystem::path executable, std::filesystem::path work_dir,
                            std::map<std::string, TaskInputs> tasks, std::size_t n_samples);
    std::vector<std::string> task_ids() const override;
    FeatureSet teacher(const std::string& task_id) override;
    FeatureSet merged(const WeightMap& weights, const std::string& task_id, std::size_t candidate) override;

private:
    FeatureSet invoke(const std::filesystem::path& checkpoint, const std::string& task_id, const std::string& tag);

    std::filesystem::path exe_;
    std::filesystem::path work_;
    std::map<std::string, TaskInputs> tasks_;
    std::map<std::string, std::filesystem::path> samples_;  // trimmed to n rows
    std::map<std::string, std::size_t> rows_;
};

/// Runs `exe` with `args` and waits. Returns the exit status (128 + signal
/// for signalled children).
int run_process(const std::filesystem::path& exe, const std::vector<std::string>& args);

struct SweepRow {
    std::size_t candidate_index = 0;
    MergeSpec spec;
    TapReport tap;
    std::map<std::string, double> eval;         // retrained-probe test R^2
    std::map<std::string, double> frozen_eval;  // fine-tuned probe reused
    std::optional<double> normalized_performance;
    std::optional<double> frozen_normalized_performance;
};

struct SweepCost {
    std::uint64_t encoder_forward_passes = 0;  // TAP path only
    std::uint64_t decoder_trainings = 0;
    std::optional<std::uint64_t> wall_clock_ms;
};

struct SweepReport {
    SweepConfig config;
    std::vector<std::string> task_ids;
    std::map<std::string, double> finetuned_eval;  // reference metric per task
    std::vector<SweepRow> rows;
    std::size_t selected_by_tap = 0;
    std::optional<std::size_t> selected_by_eval;
    SweepCost cost;
};

struct SweepOptions {
    unsigned jobs = 1;
    bool record_time = false;  // adds wall_clock_ms, making reports run dependent
};

/// `bench` supplies the trainable probes needed for tap_and_eval and may be
/// null for tap_only sweeps.
SweepReport run_sweep(const WeightMap& base, const std::vector<TaskVector>& tvs, const SweepConfig& config,
                      FeatureProvider& features, const toy::Bench* bench, const SweepOptions& options = {});

nlohmann::json sweep_report_to_json(const SweepReport& r);
// candidate_index,lambda,<mu keys>,tap_average,eval_<task>...,normalized_performance
std::string sweep_report_csv(const SweepReport& r);

}  // namespace tapmerge
