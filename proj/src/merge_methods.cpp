#include "tapmerge/merge_methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "tapmerge/error.hpp"

namespace tapmerge {

namespace {

constexpr double kFractionSlack = 1e-9;

struct MethodInfo {
    MergeMethod method;
    std::string_view name;
    std::vector<std::string_view> mu_keys;
};

const std::vector<MethodInfo>& method_table() {
    static const std::vector<MethodInfo> table = {
        {MergeMethod::avg, "avg", {}},
        {MergeMethod::ta, "ta", {}},
        {MergeMethod::ties, "ties", {"keep_fraction"}},
        {MergeMethod::breadcrumbs, "breadcrumbs", {"bottom_cut", "top_cut"}},
        {MergeMethod::consensus, "consensus", {"agreement", "keep_fraction"}},
        {MergeMethod::lines, "lines", {"lambda_max", "lambda_min"}},
        {MergeMethod::star, "star", {"energy_fraction"}},
        {MergeMethod::tsv, "tsv", {"rank_policy"}},
        {MergeMethod::normavg, "normavg", {}},
    };
    return table;
}

const MethodInfo& info(MergeMethod m) {
    for (const auto& i : method_table())
        if (i.method == m) return i;
    throw InvalidArgument("unknown merge method");
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
    Eigen::MatrixXd m(t.shape[0], t.shape[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t = Tensor::zeros({m.rows(), m.cols()});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            t.data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    return t;
}

Eigen::JacobiSVD<Eigen::MatrixXd> thin_svd(const Eigen::MatrixXd& a, const std::string& what) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success || !svd.singularValues().allFinite())
        throw NumericalError("SVD did not converge for '" + what + "'");
    return svd;
}

// Orthogonal Procrustes: the closest matrix with orthonormal columns (rows
// when wide) to `a`, i.e. P Q^T from a = P S Q^T.
Eigen::MatrixXd polar_factor(const Eigen::MatrixXd& a, const std::string& what) {
    const auto svd = thin_svd(a, what);
    return svd.matrixU() * svd.matrixV().transpose();
}

void require_fraction(double v, const char* what, bool allow_zero) {
    if (!std::isfinite(v) || v > 1.0 || (allow_zero ? v < 0.0 : v <= 0.0))
        throw InvalidArgument(std::string(what) + " must lie in " + (allow_zero ? "[0, 1]" : "(0, 1]") +
                              ", got " + std::to_string(v));
}

double user_lambda(const Lambda& lambda, const std::string& task, const std::string& layer) {
    if (const auto* s = std::get_if<double>(&lambda)) return *s;
    if (const auto* pt = std::get_if<PerTaskLambda>(&lambda)) return pt->at(task);
    return std::get<PerLayerLambda>(lambda).at(task).at(layer);
}

std::vector<std::string> ids_of(const std::vector<TaskVector>& tvs) {
    std::vector<std::string> ids;
    for (const auto& tv : tvs) ids.push_back(tv.task_id);
    return ids;
}

}  // namespace

std::string_view method_name(MergeMethod m) { return info(m).name; }

MergeMethod parse_method(std::string_view name) {
    for (const auto& i : method_table())
        if (i.name == name) return i.method;
    throw InvalidArgument("unknown merge method '" + std::string(name) + "'");
}

MergeSpec with_defaults(MergeSpec spec) {
    auto& mu = spec.mu;
    switch (spec.method) {
        case MergeMethod::ties:
            if (!mu.keep_fraction) mu.keep_fraction = 0.2;
            break;
        case MergeMethod::breadcrumbs:
            if (!mu.top_cut) mu.top_cut = 0.02;
            if (!mu.bottom_cut) mu.bottom_cut = 0.8;
            break;
        case MergeMethod::consensus:
            if (!mu.keep_fraction) mu.keep_fraction = 0.2;
            if (!mu.agreement) mu.agreement = 2;
            break;
        case MergeMethod::lines:
            if (!mu.lambda_min) mu.lambda_min = 0.5;
            if (!mu.lambda_max) mu.lambda_max = 1.0;
            break;
        case MergeMethod::star:
            if (!mu.energy_fraction) mu.energy_fraction = 0.4;
            break;
        case MergeMethod::tsv:
            if (!mu.rank_policy) mu.rank_policy = TsvRankPolicy::per_task_floor_div_T;
            break;
        default:
            break;
    }
    return spec;
}

nlohmann::json spec_to_json(const MergeSpec& spec) {
    nlohmann::json j;
    j["method"] = method_name(spec.method);
    std::visit([&](const auto& v) { j["lambda"] = v; }, spec.lambda);
    nlohmann::json mu = nlohmann::json::object();
    const auto& p = spec.mu;
    if (p.keep_fraction) mu["keep_fraction"] = *p.keep_fraction;
    if (p.top_cut) mu["top_cut"] = *p.top_cut;
    if (p.bottom_cut) mu["bottom_cut"] = *p.bottom_cut;
    if (p.agreement) mu["agreement"] = *p.agreement;
    if (p.lambda_min) mu["lambda_min"] = *p.lambda_min;
    if (p.lambda_max) mu["lambda_max"] = *p.lambda_max;
    if (p.energy_fraction) mu["energy_fraction"] = *p.energy_fraction;
    if (p.rank_policy) mu["rank_policy"] = "per_task_floor_div_T";
    j["mu"] = mu;
    return j;
}

MergeSpec spec_from_json(const nlohmann::json& j) {
    try {
        if (!j.is_object()) throw InvalidArgument("merge spec must be a JSON object");
        for (const auto& [key, v] : j.items())
            if (key != "method" && key != "lambda" && key != "mu")
                throw InvalidArgument("unknown merge spec key '" + key + "'");
        MergeSpec spec;
        spec.method = parse_method(j.at("method").get<std::string>());
        if (j.contains("lambda")) {
            const auto& l = j.at("lambda");
            if (l.is_number()) {
                spec.lambda = l.get<double>();
            } else if (l.is_object() && !l.empty() && l.begin()->is_object()) {
                spec.lambda = l.get<PerLayerLambda>();
            } else if (l.is_object()) {
                spec.lambda = l.get<PerTaskLambda>();
            } else {
                throw InvalidArgument("lambda must be a number or an object");
            }
        }
        if (j.contains("mu")) {
            const auto& mu = j.at("mu");
            if (!mu.is_object()) throw InvalidArgument("mu must be an object");
            const auto& allowed = info(spec.method).mu_keys;
            for (const auto& [key, v] : mu.items()) {
                if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
                    throw InvalidArgument("hyperparameter '" + key + "' does not apply to method '" +
                                          std::string(method_name(spec.method)) + "'");
                if (key == "keep_fraction") spec.mu.keep_fraction = v.get<double>();
                else if (key == "top_cut") spec.mu.top_cut = v.get<double>();
                else if (key == "bottom_cut") spec.mu.bottom_cut = v.get<double>();
                else if (key == "agreement") {
                    const double a = v.get<double>();
                    if (a != std::floor(a)) throw InvalidArgument("agreement must be an integer");
                    spec.mu.agreement = static_cast<int>(a);
                }
                else if (key == "lambda_min") spec.mu.lambda_min = v.get<double>();
                else if (key == "lambda_max") spec.mu.lambda_max = v.get<double>();
                else if (key == "energy_fraction") spec.mu.energy_fraction = v.get<double>();
                else if (key == "rank_policy") {
                    if (v.get<std::string>() != "per_task_floor_div_T")
                        throw InvalidArgument("unknown TSV rank policy '" + v.get<std::string>() + "'");
                    spec.mu.rank_policy = TsvRankPolicy::per_task_floor_div_T;
                }
            }
        }
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("malformed merge spec: ") + e.what());
    }
}

void validate_spec(const MergeSpec& raw, const std::vector<std::string>& task_ids,
                   const std::vector<std::string>& layer_groups) {
    const MergeSpec spec = with_defaults(raw);
    const auto& mu = spec.mu;
    const auto& allowed = info(spec.method).mu_keys;
    const auto has = [&](std::string_view k) { return std::find(allowed.begin(), allowed.end(), k) != allowed.end(); };
    const std::pair<const char*, bool> set_fields[] = {
        {"keep_fraction", mu.keep_fraction.has_value()}, {"top_cut", mu.top_cut.has_value()},
        {"bottom_cut", mu.bottom_cut.has_value()},       {"agreement", mu.agreement.has_value()},
        {"lambda_min", mu.lambda_min.has_value()},       {"lambda_max", mu.lambda_max.has_value()},
        {"energy_fraction", mu.energy_fraction.has_value()}, {"rank_policy", mu.rank_policy.has_value()},
    };
    for (const auto& [key, set] : set_fields)
        if (set && !has(key))
            throw InvalidArgument(std::string("hyperparameter '") + key + "' does not apply to method '" +
                                  std::string(method_name(spec.method)) + "'");

    switch (spec.method) {
        case MergeMethod::ties:
            require_fraction(*mu.keep_fraction, "keep_fraction", false);
            break;
        case MergeMethod::breadcrumbs:
            require_fraction(*mu.top_cut, "top_cut", true);
            require_fraction(*mu.bottom_cut, "bottom_cut", true);
            if (*mu.top_cut + *mu.bottom_cut >= 1.0) throw InvalidArgument("top_cut + bottom_cut must be < 1");
            break;
        case MergeMethod::consensus:
            require_fraction(*mu.keep_fraction, "keep_fraction", false);
            if (*mu.agreement < 2) throw InvalidArgument("agreement must be >= 2");
            if (task_ids.size() < static_cast<std::size_t>(*mu.agreement))
                throw InvalidArgument("consensus needs at least `agreement` tasks");
            break;
        case MergeMethod::lines:
            if (!std::isfinite(*mu.lambda_min) || !std::isfinite(*mu.lambda_max) || *mu.lambda_min > *mu.lambda_max)
                throw InvalidArgument("lines needs finite lambda_min <= lambda_max");
            break;
        case MergeMethod::star:
            require_fraction(*mu.energy_fraction, "energy_fraction", false);
            break;
        default:
            break;
    }

    const std::set<std::string> tasks(task_ids.begin(), task_ids.end());
    const std::set<std::string> layers(layer_groups.begin(), layer_groups.end());
    const auto check_value = [](double v) {
        if (!std::isfinite(v)) throw InvalidArgument("lambda values must be finite");
    };
    if (const auto* s = std::get_if<double>(&spec.lambda)) {
        check_value(*s);
    } else if (const auto* pt = std::get_if<PerTaskLambda>(&spec.lambda)) {
        for (const auto& [t, v] : *pt) {
            if (!tasks.contains(t)) throw InvalidArgument("lambda references unknown task '" + t + "'");
            check_value(v);
        }
        for (const auto& t : tasks)
            if (!pt->contains(t)) throw InvalidArgument("lambda is missing task '" + t + "'");
    } else {
        const auto& pl = std::get<PerLayerLambda>(spec.lambda);
        for (const auto& [t, row] : pl) {
            if (!tasks.contains(t)) throw InvalidArgument("lambda references unknown task '" + t + "'");
            for (const auto& [l, v] : row) {
                if (!layers.contains(l)) throw InvalidArgument("lambda references unknown layer '" + l + "'");
                check_value(v);
            }
            for (const auto& l : layers)
                if (!row.contains(l)) throw InvalidArgument("lambda for task '" + t + "' is missing layer '" + l + "'");
        }
        for (const auto& t : tasks)
            if (!pl.contains(t)) throw InvalidArgument("lambda is missing task '" + t + "'");
    }
}

// --- transforms -----------------------------------------------------------

std::size_t keep_count(double fraction, std::size_t d) {
    const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d) - kFractionSlack));
    return std::clamp<std::size_t>(k, d == 0 ? 0 : 1, d);
}

std::vector<std::size_t> magnitude_order(std::span<const float> values) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(values[a]) > std::fabs(values[b]); });
    return idx;
}

namespace {

std::vector<char> top_k_mask(std::span<const float> values, double keep_fraction) {
    std::vector<char> mask(values.size(), 0);
    const auto order = magnitude_order(values);
    const std::size_t k = keep_count(keep_fraction, values.size());
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
    return mask;
}

}  // namespace

std::vector<TaskVector> transform_ties(const std::vector<TaskVector>& tvs, double keep_fraction) {
    if (tvs.empty()) throw InvalidArgument("TIES needs at least one task vector");
    require_fraction(keep_fraction, "keep_fraction", false);
    check_task_vectors(tvs);

    std::vector<TaskVector> out;
    for (const auto& tv : tvs) out.push_back({tv.task_id, zeros_like(tv.delta)});

    for (const auto& [name, ref] : tvs.front().delta) {
        const std::size_t d = ref.numel();
        std::vector<std::vector<char>> masks;
        for (const auto& tv : tvs) masks.push_back(top_k_mask(tv.delta.at(name).data, keep_fraction));
        for (std::size_t i = 0; i < d; ++i) {
            double sum = 0.0;
            for (std::size_t t = 0; t < tvs.size(); ++t)
                if (masks[t][i]) sum += tvs[t].delta.at(name).data[i];
            const bool positive = sum >= 0.0;  // exact zero elects +
            for (std::size_t t = 0; t < tvs.size(); ++t) {
                const float v = tvs[t].delta.at(name).data[i];
                if (!masks[t][i]) continue;
                if (v == 0.0f || (v > 0.0f) == positive) out[t].delta.at(name).data[i] = v;
            }
        }
    }
    return out;
}

TaskVector transform_breadcrumbs(const TaskVector& tv, double top_cut, double bottom_cut) {
    require_fraction(top_cut, "top_cut", true);
    require_fraction(bottom_cut, "bottom_cut", true);
    if (top_cut + bottom_cut >= 1.0) throw InvalidArgument("top_cut + bottom_cut must be < 1");

    TaskVector out{tv.task_id, zeros_like(tv.delta)};
    for (const auto& [name, t] : tv.delta) {
        const std::size_t d = t.numel();
        const auto n_top = static_cast<std::size_t>(std::floor(top_cut * static_cast<double>(d) + kFractionSlack));
        const auto n_keep = keep_count(1.0 - top_cut - bottom_cut, d);
        const auto order = magnitude_order(t.data);
        auto& dst = out.delta.at(name).data;
        for (std::size_t r = n_top; r < n_top + n_keep && r < d; ++r) dst[order[r]] = t.data[order[r]];
    }
    return out;
}

ConsensusResult transform_consensus(const std::vector<TaskVector>& tvs, double keep_fraction, int agreement) {
    require_fraction(keep_fraction, "keep_fraction", false);
    if (agreement < 2) throw InvalidArgument("agreement must be >= 2");
    if (tvs.size() < static_cast<std::size_t>(agreement))
        throw InvalidArgument("consensus: " + std::to_string(tvs.size()) + " tasks < agreement " +
                              std::to_string(agreement));
    check_task_vectors(tvs);

    ConsensusResult res;
    res.mask = zeros_like(tvs.front().delta);
    for (const auto& [name, ref] : tvs.front().delta) {
        std::vector<int> votes(ref.numel(), 0);
        for (const auto& tv : tvs) {
            const auto m = top_k_mask(tv.delta.at(name).data, keep_fraction);
            for (std::size_t i = 0; i < m.size(); ++i) votes[i] += m[i];
        }
        auto& mask = res.mask.at(name).data;
        for (std::size_t i = 0; i < votes.size(); ++i) mask[i] = votes[i] >= agreement ? 1.0f : 0.0f;
    }
    for (const auto& tv : tvs) {
        TaskVector p{tv.task_id, tv.delta};
        for (auto& [name, t] : p.delta) {
            const auto& mask = res.mask.at(name).data;
            for (std::size_t i = 0; i < t.numel(); ++i)
                if (mask[i] == 0.0f) t.data[i] = 0.0f;
        }
        res.pruned.push_back(std::move(p));
    }
    return res;
}

std::vector<double> lambda_lines(const std::vector<std::string>& layer_order, double lambda_min, double lambda_max) {
    if (layer_order.empty()) throw InvalidArgument("lines: empty layer order");
    if (lambda_min > lambda_max) throw InvalidArgument("lines: lambda_min > lambda_max");
    const std::size_t L = layer_order.size();
    std::vector<double> out(L, lambda_min);
    for (std::size_t l = 1; l < L; ++l)
        out[l] = lambda_min + (lambda_max - lambda_min) * static_cast<double>(l) / static_cast<double>(L - 1);
    return out;
}

TaskVector transform_star(const TaskVector& tv, double energy_fraction) {
    require_fraction(energy_fraction, "energy_fraction", false);
    TaskVector out{tv.task_id, {}};
    for (const auto& [name, t] : tv.delta) {
        if (!t.is_matrix()) {
            out.delta.emplace(name, t);
            continue;
        }
        const auto svd = thin_svd(to_matrix(t), name);
        const Eigen::VectorXd& s = svd.singularValues();
        double total = 0.0;
        for (Eigen::Index i = 0; i < s.size(); ++i) total += s(i) * s(i);
        if (total == 0.0) {
            out.delta.emplace(name, t);
            continue;
        }
        Eigen::Index r = 0;
        double kept = 0.0;
        while (r < s.size()) {
            kept += s(r) * s(r);
            ++r;
            if (kept >= energy_fraction * total) break;
        }
        const double c = std::sqrt(total / kept);
        const Eigen::MatrixXd approx =
            svd.matrixU().leftCols(r) * (c * s.head(r)).asDiagonal() * svd.matrixV().leftCols(r).transpose();
        out.delta.emplace(name, from_matrix(approx));
    }
    return out;
}

TsvFactors tsv_factors(const std::vector<Eigen::MatrixXd>& deltas, TsvRankPolicy) {
    if (deltas.empty()) throw InvalidArgument("TSV needs at least one task vector");
    const Eigen::Index m = deltas.front().rows(), n = deltas.front().cols();
    const auto T = static_cast<Eigen::Index>(deltas.size());
    const Eigen::Index r = std::max<Eigen::Index>(1, std::min(m, n) / T);

    TsvFactors f;
    f.rank_per_task = static_cast<std::size_t>(r);
    Eigen::MatrixXd u_stack(m, T * r), v_stack(n, T * r);
    f.sigma.resize(T * r);
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto svd = thin_svd(deltas[static_cast<std::size_t>(t)], "task vector block");
        const Eigen::Index avail = svd.singularValues().size();
        for (Eigen::Index j = 0; j < r; ++j) {
            if (j < avail) {
                u_stack.col(t * r + j) = svd.matrixU().col(j);
                v_stack.col(t * r + j) = svd.matrixV().col(j);
                f.sigma(t * r + j) = svd.singularValues()(j);
            } else {
                u_stack.col(t * r + j).setZero();
                v_stack.col(t * r + j).setZero();
                f.sigma(t * r + j) = 0.0;
            }
        }
    }
    f.u_orth = polar_factor(u_stack, "stacked left singular vectors");
    f.v_orth = polar_factor(v_stack, "stacked right singular vectors");
    return f;
}

namespace {

// Per-task blocks U_orth[:, block t] diag(sigma_t) V_orth[:, block t]^T.
std::vector<TaskVector> tsv_components(const std::vector<TaskVector>& tvs, TsvRankPolicy policy) {
    if (tvs.empty()) throw InvalidArgument("TSV needs at least one task vector");
    check_task_vectors(tvs);
    std::vector<TaskVector> out;
    for (const auto& tv : tvs) out.push_back({tv.task_id, {}});
    for (const auto& [name, ref] : tvs.front().delta) {
        if (!ref.is_matrix()) {
            for (std::size_t t = 0; t < tvs.size(); ++t) out[t].delta.emplace(name, tvs[t].delta.at(name));
            continue;
        }
        std::vector<Eigen::MatrixXd> mats;
        for (const auto& tv : tvs) mats.push_back(to_matrix(tv.delta.at(name)));
        const auto f = tsv_factors(mats, policy);
        const auto r = static_cast<Eigen::Index>(f.rank_per_task);
        for (std::size_t t = 0; t < tvs.size(); ++t) {
            const auto off = static_cast<Eigen::Index>(t) * r;
            const Eigen::MatrixXd block = f.u_orth.middleCols(off, r) * f.sigma.segment(off, r).asDiagonal() *
                                          f.v_orth.middleCols(off, r).transpose();
            out[t].delta.emplace(name, from_matrix(block));
        }
    }
    return out;
}

}  // namespace

WeightMap transform_tsv(const std::vector<TaskVector>& tvs, TsvRankPolicy policy) {
    if (tvs.empty()) throw InvalidArgument("TSV needs at least one task vector");
    check_task_vectors(tvs);
    WeightMap out;
    for (const auto& [name, ref] : tvs.front().delta) {
        if (!ref.is_matrix()) {
            Tensor sum = Tensor::zeros(ref.shape);
            for (std::size_t i = 0; i < ref.numel(); ++i) {
                double acc = 0.0;
                for (const auto& tv : tvs) acc += tv.delta.at(name).data[i];
                sum.data[i] = static_cast<float>(acc);
            }
            out.emplace(name, std::move(sum));
            continue;
        }
        std::vector<Eigen::MatrixXd> mats;
        for (const auto& tv : tvs) mats.push_back(to_matrix(tv.delta.at(name)));
        const auto f = tsv_factors(mats, policy);
        out.emplace(name, from_matrix(f.u_orth * f.sigma.asDiagonal() * f.v_orth.transpose()));
    }
    return out;
}

PerLayerLambda lambda_normavg(const std::vector<TaskVector>& tvs, const LayerGrouping& grouping) {
    if (tvs.empty()) throw InvalidArgument("NormAvg needs at least one task vector");
    check_task_vectors(tvs);
    std::vector<std::map<std::string, double>> per_task;
    for (const auto& tv : tvs) per_task.push_back(layer_norms(tv.delta, grouping));

    PerLayerLambda out;
    for (const auto& [layer, unused] : per_task.front()) {
        double smallest = per_task.front().at(layer);
        for (std::size_t t = 0; t < tvs.size(); ++t) {
            const double n = per_task[t].at(layer);
            if (n == 0.0)
                throw NumericalError("NormAvg: task '" + tvs[t].task_id + "' has zero norm in layer '" + layer + "'");
            smallest = std::min(smallest, n);
        }
        for (std::size_t t = 0; t < tvs.size(); ++t) out[tvs[t].task_id][layer] = smallest / per_task[t].at(layer);
    }
    return out;
}

// --- merge rule --------------------------------------------------------------

std::vector<TaskVector> transformed_task_vectors(const std::vector<TaskVector>& tvs, const MergeSpec& raw) {
    const MergeSpec spec = with_defaults(raw);
    const auto& mu = spec.mu;
    switch (spec.method) {
        case MergeMethod::ties:
            return transform_ties(tvs, *mu.keep_fraction);
        case MergeMethod::breadcrumbs: {
            std::vector<TaskVector> out;
            for (const auto& tv : tvs) out.push_back(transform_breadcrumbs(tv, *mu.top_cut, *mu.bottom_cut));
            return out;
        }
        case MergeMethod::consensus:
            return transform_consensus(tvs, *mu.keep_fraction, *mu.agreement).pruned;
        case MergeMethod::star: {
            std::vector<TaskVector> out;
            for (const auto& tv : tvs) out.push_back(transform_star(tv, *mu.energy_fraction));
            return out;
        }
        case MergeMethod::tsv:
            return tsv_components(tvs, *mu.rank_policy);
        default:
            return tvs;
    }
}

PerLayerLambda effective_lambda(const std::vector<TaskVector>& tvs, const MergeSpec& raw,
                                const LayerGrouping& grouping) {
    const MergeSpec spec = with_defaults(raw);
    const auto layers = grouping.ordered_groups(tvs.front().delta);
    const double T = static_cast<double>(tvs.size());

    PerLayerLambda schedule;
    if (spec.method == MergeMethod::normavg) schedule = lambda_normavg(tvs, grouping);
    std::vector<double> lines;
    if (spec.method == MergeMethod::lines) lines = lambda_lines(layers, *spec.mu.lambda_min, *spec.mu.lambda_max);

    PerLayerLambda out;
    for (const auto& tv : tvs) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            double factor = 1.0;
            if (spec.method == MergeMethod::avg) factor = 1.0 / T;
            else if (spec.method == MergeMethod::lines) factor = lines[l];
            else if (spec.method == MergeMethod::normavg) factor = schedule.at(tv.task_id).at(layers[l]);
            out[tv.task_id][layers[l]] = user_lambda(spec.lambda, tv.task_id, layers[l]) * factor;
        }
    }
    return out;
}

MergedModel merge(const WeightMap& base, const std::vector<TaskVector>& tvs, const MergeSpec& raw,
                  const LayerGrouping& grouping) {
    if (tvs.empty()) throw InvalidArgument("merge needs at least one task vector");
    check_task_vectors(tvs);
    const auto digest = validate_compat({&base, &tvs.front().delta});
    const MergeSpec spec = with_defaults(raw);
    validate_spec(spec, ids_of(tvs), grouping.ordered_groups(base));

    const auto phis = transformed_task_vectors(tvs, spec);
    const auto coef = effective_lambda(tvs, spec, grouping);

    MergedModel merged;
    merged.spec = spec;
    merged.task_ids = ids_of(tvs);
    merged.base_digest = digest.hash;
    for (const auto& [name, b] : base) {
        const std::string layer = grouping.group_of(name);
        std::vector<double> acc(b.data.begin(), b.data.end());
        for (const auto& phi : phis) {
            const double c = coef.at(phi.task_id).at(layer);
            if (c == 0.0) continue;  // keeps the base bit-exact, signed zeros included
            const auto& src = phi.delta.at(name).data;
            if (phi.residual.empty()) {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c * double(src[i]);
            } else {
                const auto& lo = phi.residual.at(name).data;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c * (double(src[i]) + double(lo[i]));
            }
        }
        Tensor t = Tensor::zeros(b.shape);
        for (std::size_t i = 0; i < acc.size(); ++i) t.data[i] = static_cast<float>(acc[i]);
        merged.weights.emplace(name, std::move(t));
    }
    check_weight_map(merged.weights);
    return merged;
}

}  // namespace tapmerge
