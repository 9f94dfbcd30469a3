#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tapmerge/error.hpp"
#include "tapmerge/merge_methods.hpp"
#include "tapmerge/toy_bench.hpp"

namespace tapmerge::ada {

enum class LambdaStructure { per_task, per_task_per_layer };

std::string_view structure_name(LambdaStructure s);
LambdaStructure parse_structure(std::string_view name);

struct AdaConfig {
    LambdaStructure structure = LambdaStructure::per_task;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 16;
    std::size_t iterations = 500;
    double ema_decay = 0.99;
    double norm_eps = 1e-5;  // added to the running variance
    std::size_t snapshot_every = 10;
    std::optional<double> initial_lambda;  // every coefficient; 1/T when unset
    bool resample = true;                  // false reuses the first mini-batch every iteration
    std::uint64_t seed = 0;

    void validate() const;
};

/// Base encoder plus per-task deltas in the toy encoder layout. Layer l of
/// the encoder is the layer group "layer{l}".
struct Problem {
    toy::Encoder base;
    std::vector<toy::Encoder> deltas;
    std::vector<std::string> task_ids;
    LambdaStructure structure = LambdaStructure::per_task;

    std::size_t num_tasks() const { return deltas.size(); }
    std::size_t num_layers() const { return base.size(); }
    /// Length of the flat lambda vector: T, or T * L (task-major).
    std::size_t num_coefficients() const;
    /// Index into the flat vector of task t's coefficient for layer l.
    std::size_t index(std::size_t t, std::size_t l) const;
};

Problem make_problem(const WeightMap& base, const std::vector<TaskVector>& tvs, LambdaStructure structure);

/// base + sum_t lambda_t (.) tau_t, kept in double precision.
toy::Encoder merged_encoder(const Problem& p, const Eigen::VectorXd& lambda);

Lambda to_merge_lambda(const Problem& p, const Eigen::VectorXd& lambda);

/// Per-dimension running mean and variance. The first update copies the
/// batch statistics; later ones blend them with weight (1 - decay).
struct RunningStats {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd var;
    bool initialized = false;

    /// Returns the largest absolute change of any mean or variance entry.
    double update(const Eigen::MatrixXd& features, double decay);
    Eigen::MatrixXd normalize(const Eigen::MatrixXd& features, double eps) const;
};

/// One statistic for the merged student, updated with the batches of all
/// tasks, and one per teacher.
struct EmaState {
    RunningStats student;
    std::vector<RunningStats> teacher;

    /// Updates the student with the stacked features of every task and each
    /// teacher with its own; returns the largest entry change.
    double update(const std::vector<Eigen::MatrixXd>& student_features,
                  const std::vector<Eigen::MatrixXd>& teacher_features, double decay);
};

/// One mini-batch per task together with the (constant) teacher features.
struct Batch {
    std::vector<Eigen::MatrixXd> inputs;
    std::vector<Eigen::MatrixXd> teacher_features;
};

struct LossResult {
    double loss = 0.0;
    std::vector<double> per_task;
    Eigen::VectorXd gradient;  // empty unless requested
};

/// Mean over tasks of the mean cosine dissimilarity between normalised
/// student and teacher features. Statistics are treated as constants.
LossResult tap_loss(const Problem& p, const Eigen::VectorXd& lambda, const Batch& batch, const EmaState& ema,
                    double norm_eps);
LossResult tap_loss_grad(const Problem& p, const Eigen::VectorXd& lambda, const Batch& batch, const EmaState& ema,
                         double norm_eps);

struct TraceRow {
    std::size_t iteration = 0;
    double total_loss = 0.0;
    std::vector<double> per_task;
    std::optional<Eigen::VectorXd> lambda;  // present every snapshot_every iterations and at the end
    double ema_delta = 0.0;                 // largest statistics change in this step
};

struct AdaTrace {
    std::vector<std::string> task_ids;
    std::vector<std::string> coefficient_names;
    std::vector<TraceRow> rows;
};

/// iteration,total_loss,loss_task_<id>...,lambda_<name>...; lambda cells are
/// empty between snapshots.
std::string trace_csv(const AdaTrace& trace);

struct AdaResult {
    Eigen::VectorXd lambda;
    AdaTrace trace;
};

/// Raised when the loss becomes non-finite; carries the trace so far.
class Diverged : public NumericalError {
public:
    Diverged(const std::string& what, AdaTrace trace) : NumericalError(what), trace(std::move(trace)) {}
    AdaTrace trace;
};

/// Adam on the flat lambda vector, initialised to 1/T. Every iteration draws
/// `batch_size` training inputs per task without replacement.
AdaResult optimize(const Problem& p, const std::vector<toy::ToyTask>& tasks, const std::vector<WeightMap>& teachers,
                   const AdaConfig& config);

/// Draws the iteration's batch: inputs per task and teacher features.
Batch draw_batch(const std::vector<toy::ToyTask>& tasks, const std::vector<toy::Encoder>& teachers,
                 std::size_t batch_size, std::uint64_t seed, std::size_t iteration);

}  // namespace tapmerge::ada
