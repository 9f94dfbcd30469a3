#pragma once

#include <string>
#include <vector>

#include "tapmerge/tensor_store.hpp"

namespace tapmerge {

/// delta = finetuned - base for one task.
struct TaskVector {
    std::string task_id;
    WeightMap delta;
    // Rounding error of delta: delta + residual == finetuned - base in double.
    // Empty when unknown; transforms drop it.
    WeightMap residual = {};
};

/// Assigns every parameter name to a layer group.
///
/// Two rules are supported:
///  - strip_suffix(k): drop the last k dot-separated components
///    ("layer3.weight" -> "layer3" with k = 1). A name with no more than k
///    components is its own group.
///  - prefixes(list): a parameter belongs to the longest listed prefix that
///    equals it or is followed by '.'; unmatched parameters form singleton
///    groups. Every listed prefix must match at least one parameter.
class LayerGrouping {
public:
    static LayerGrouping strip_suffix(int components = 1);
    static LayerGrouping prefixes(std::vector<std::string> prefixes);

    std::string group_of(const std::string& param_name) const;

    /// Distinct groups of `map` in natural order (digit runs compare
    /// numerically, so "layer2" precedes "layer10").
    std::vector<std::string> ordered_groups(const WeightMap& map) const;

private:
    LayerGrouping() = default;
    int strip_ = 1;
    std::vector<std::string> prefixes_;
};

/// "layer2" < "layer10"; falls back to plain comparison otherwise.
bool natural_less(const std::string& a, const std::string& b);

TaskVector compute_task_vector(const WeightMap& base, const WeightMap& finetuned, std::string task_id);

/// Throws if ids are empty/duplicated or schemas disagree.
void check_task_vectors(const std::vector<TaskVector>& tvs);

enum class NormScope { global, per_layer };

struct NormRow {
    std::string task_id;
    std::string layer;  // "ALL" for the global scope
    double l2_norm = 0.0;
};

struct NormReport {
    NormScope scope = NormScope::global;
    std::vector<NormRow> rows;  // task-major, layers in natural order
};

NormReport norms(const std::vector<TaskVector>& tvs, NormScope scope,
                 const LayerGrouping& grouping = LayerGrouping::strip_suffix(1));

/// Per-layer L2 norm of one weight map, keyed by group.
std::map<std::string, double> layer_norms(const WeightMap& delta, const LayerGrouping& grouping);

struct CosineReport {
    std::vector<std::string> task_ids;
    std::vector<std::vector<double>> pairwise;  // T x T
    std::vector<double> to_average;             // cos(tau_t, mean tau)
    // Every parameter is flattened into the vectors being compared.
    std::string flatten_scope = "all_parameters";
};

CosineReport cosine_analysis(const std::vector<TaskVector>& tvs);

// CSV with header "task_id,layer,l2_norm".
std::string norms_csv(const NormReport& report);
// CSV with header "task_a,task_b,cosine"; cosines against the average task
// vector use task_b = "AVERAGE".
std::string cosine_csv(const CosineReport& report);

}  // namespace tapmerge
