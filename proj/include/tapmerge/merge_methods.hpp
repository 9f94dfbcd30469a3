#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tapmerge/task_vector.hpp"
#include "tapmerge/tensor_store.hpp"

namespace tapmerge {

enum class MergeMethod { avg, ta, ties, breadcrumbs, consensus, lines, star, tsv, normavg };

std::string_view method_name(MergeMethod m);
MergeMethod parse_method(std::string_view name);

using PerTaskLambda = std::map<std::string, double>;
using PerLayerLambda = std::map<std::string, std::map<std::string, double>>;  // task -> layer -> value
using Lambda = std::variant<double, PerTaskLambda, PerLayerLambda>;

enum class TsvRankPolicy { per_task_floor_div_T };

/// Method hyperparameters. Only the fields relevant to the method may be set.
struct TransformParams {
    std::optional<double> keep_fraction;    // ties, consensus
    std::optional<double> top_cut;          // breadcrumbs
    std::optional<double> bottom_cut;       // breadcrumbs
    std::optional<int> agreement;           // consensus
    std::optional<double> lambda_min;       // lines
    std::optional<double> lambda_max;       // lines
    std::optional<double> energy_fraction;  // star
    std::optional<TsvRankPolicy> rank_policy;  // tsv

    friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

/// Method plus coefficient structure and transform hyperparameters.
///
/// `lambda` is the coefficient applied to each transformed task vector.
/// Methods that carry their own coefficient schedule (avg: 1/T, lines:
/// linear per-layer ramp, normavg: per-layer norm equalisation) multiply
/// that schedule by `lambda`, so lambda = 1 gives the plain method and
/// lambda = 0 always yields the base model.
struct MergeSpec {
    MergeMethod method = MergeMethod::ta;
    Lambda lambda = 1.0;
    TransformParams mu;

    friend bool operator==(const MergeSpec&, const MergeSpec&) = default;
};

/// Copy of `spec` with every unset hyperparameter of its method filled in.
MergeSpec with_defaults(MergeSpec spec);

/// Range checks on mu, plus coverage checks of lambda against the given
/// tasks and layer groups. Throws InvalidArgument.
void validate_spec(const MergeSpec& spec, const std::vector<std::string>& task_ids,
                   const std::vector<std::string>& layer_groups);

nlohmann::json spec_to_json(const MergeSpec& spec);
MergeSpec spec_from_json(const nlohmann::json& j);

struct MergedModel {
    WeightMap weights;
    MergeSpec spec;  // with defaults resolved
    std::vector<std::string> task_ids;
    std::uint64_t base_digest = 0;
};

/// base + sum_t lambda_t (.) phi(tau_t; mu). Tasks are accumulated in input
/// order, in double precision, and rounded once per element.
MergedModel merge(const WeightMap& base, const std::vector<TaskVector>& tvs, const MergeSpec& spec,
                  const LayerGrouping& grouping = LayerGrouping::strip_suffix(1));

/// phi(tau_t; mu) for every task, in input order. For TSV these are the
/// per-task blocks of the orthogonalised factorisation, which sum to the
/// merged delta.
std::vector<TaskVector> transformed_task_vectors(const std::vector<TaskVector>& tvs, const MergeSpec& spec);

/// Fully expanded coefficient table task -> layer -> value (schedule times
/// user lambda).
PerLayerLambda effective_lambda(const std::vector<TaskVector>& tvs, const MergeSpec& spec,
                                const LayerGrouping& grouping);

// --- transforms -----------------------------------------------------------

/// Number of entries kept by a top-fraction selection: ceil(fraction * d).
std::size_t keep_count(double fraction, std::size_t d);

/// Indices sorted by descending magnitude, ties by ascending index.
std::vector<std::size_t> magnitude_order(std::span<const float> values);

std::vector<TaskVector> transform_ties(const std::vector<TaskVector>& tvs, double keep_fraction);

TaskVector transform_breadcrumbs(const TaskVector& tv, double top_cut, double bottom_cut);

struct ConsensusResult {
    WeightMap mask;  // entries are 0 or 1
    std::vector<TaskVector> pruned;
};
ConsensusResult transform_consensus(const std::vector<TaskVector>& tvs, double keep_fraction, int agreement);

std::vector<double> lambda_lines(const std::vector<std::string>& layer_order, double lambda_min, double lambda_max);

TaskVector transform_star(const TaskVector& tv, double energy_fraction);

/// Per-matrix TSV factorisation, exposed for inspection and tests.
struct TsvFactors {
    Eigen::MatrixXd u_orth;  // m x (T r)
    Eigen::VectorXd sigma;   // concatenated per-task singular values
    Eigen::MatrixXd v_orth;  // n x (T r)
    std::size_t rank_per_task = 0;
};
TsvFactors tsv_factors(const std::vector<Eigen::MatrixXd>& deltas, TsvRankPolicy policy);

WeightMap transform_tsv(const std::vector<TaskVector>& tvs, TsvRankPolicy policy);

PerLayerLambda lambda_normavg(const std::vector<TaskVector>& tvs,
                              const LayerGrouping& grouping = LayerGrouping::strip_suffix(1));

}  // namespace tapmerge
