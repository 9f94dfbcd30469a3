// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "bench_fixture.hpp"
#include "helpers.hpp"
#include "oracles.hpp"
#include "tapmerge/ada_tap.hpp"
#include "tapmerge/cli.hpp"
#include "tapmerge/merge_methods.hpp"
#include "tapmerge/sweep.hpp"
#include "tapmerge/tap.hpp"

using namespace tapmerge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) detail << "failed: " << what << "; ";
        pass = pass && ok;
    }
};

const MergeMethod kAllMethods[] = {MergeMethod::avg,       MergeMethod::ta,    MergeMethod::ties,
                                   MergeMethod::breadcrumbs, MergeMethod::consensus, MergeMethod::lines,
                                   MergeMethod::star,      MergeMethod::tsv,   MergeMethod::normavg};

bool bitwise_equal(const WeightMap& a, const WeightMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second.shape != t.shape) return false;
        if (std::memcmp(t.data.data(), it->second.data.data(), t.numel() * sizeof(float)) != 0) return false;
    }
    return true;
}

std::vector<TaskVector> random_tvs(std::size_t T, std::uint64_t seed, double scale) {
    std::vector<TaskVector> tvs;
    for (std::size_t t = 0; t < T; ++t) tvs.push_back({"task" + std::to_string(t), testing::random_map(seed + t, scale)});
    return tvs;
}

// Largest |a - b| / |b| over elements (0 when both are 0).
double max_rel(const WeightMap& a, const WeightMap& b) {
    double worst = 0.0;
    for (const auto& [name, t] : b)
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double d = std::fabs(double(a.at(name).data[i]) - t.data[i]);
            if (d > 0.0) worst = std::max(worst, d / std::fabs(double(t.data[i])));
        }
    return worst;
}

// --- 1 ----------------------------------------------------------------------
void merging_identities(Outcome& o) {
    const auto& bench = testing::default_bench();
    const auto bench_tvs = testing::bench_task_vectors(bench);
    struct Case {
        WeightMap base;
        std::vector<TaskVector> tvs;
        std::vector<WeightMap> finetuned;
    };
    std::vector<Case> cases = {{bench.base, bench_tvs, bench.finetuned}};
    for (std::uint64_t s = 0; s < 5; ++s) {
        Case c{testing::random_map(1000 + s, 1.0), random_tvs(3, 2000 + 10 * s, 0.05), {}};
        for (const auto& tv : c.tvs) c.finetuned.push_back(add(c.base, tv.delta));
        c.tvs.clear();
        for (std::size_t t = 0; t < c.finetuned.size(); ++t)
            c.tvs.push_back(compute_task_vector(c.base, c.finetuned[t], "task" + std::to_string(t)));
        cases.push_back(std::move(c));
    }
    double worst_ta = 0.0, worst_avg = 0.0;
    for (const auto& c : cases) {
        for (auto m : kAllMethods)
            o.require(bitwise_equal(merge(c.base, c.tvs, MergeSpec{m, 0.0, {}}).weights, c.base),
                      "lambda=0 base reproduction for " + std::string(method_name(m)));
        for (std::size_t t = 0; t < c.tvs.size(); ++t)
            worst_ta = std::max(worst_ta, max_rel(merge(c.base, {c.tvs[t]}, MergeSpec{MergeMethod::ta, 1.0, {}}).weights,
                                                  c.finetuned[t]));
        PerTaskLambda inv;
        for (const auto& tv : c.tvs) inv[tv.task_id] = 1.0 / static_cast<double>(c.tvs.size());
        worst_avg = std::max(worst_avg, max_rel(merge(c.base, c.tvs, MergeSpec{MergeMethod::avg, 1.0, {}}).weights,
                                                merge(c.base, c.tvs, MergeSpec{MergeMethod::ta, inv, {}}).weights));
    }
    o.require(worst_ta <= 1e-6, "TA T=1 reproduction");
    o.require(worst_avg <= 1e-6, "Avg vs TA(1/T)");
    o.detail << "9 methods x " << cases.size() << " checkpoints at lambda=0 bitwise; TA T=1 max rel err " << worst_ta
             << "; Avg vs TA(1/T) max rel err " << worst_avg;
}

// --- 2 ----------------------------------------------------------------------
WeightMap small_tensor_map(CounterRng& rng, bool integers) {
    const std::vector<std::vector<std::int64_t>> shapes = {{1}, {2}, {3}, {4}, {5}, {6}, {7}, {8},
                                                           {1, 8}, {2, 2}, {2, 3}, {2, 4}, {3, 2}, {2, 2, 2}};
    WeightMap m;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        auto t = Tensor::zeros(shapes[s]);
        for (auto& v : t.data)
            v = integers ? static_cast<float>(static_cast<int>(rng.below(7)) - 3) : static_cast<float>(rng.normal());
        m.emplace("p" + std::to_string(s), std::move(t));
    }
    return m;
}

Eigen::MatrixXd as_matrix(const Tensor& t) {
    Eigen::MatrixXd m(t.shape[0], t.shape[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
}

void transform_oracles(Outcome& o) {
    std::size_t compared = 0;
    bool ties_ok = true, bc_ok = true, cons_ok = true;
    for (bool integers : {true, false}) {
        for (int trial = 0; trial < 40; ++trial) {
            CounterRng rng(static_cast<std::uint64_t>(trial), integers ? "acc-int" : "acc-real");
            std::vector<TaskVector> tvs;
            for (int t = 0; t < 4; ++t) tvs.push_back({"t" + std::to_string(t), small_tensor_map(rng, integers)});
            for (double keep : {0.1, 0.2, 0.5, 0.8, 1.0}) {
                const auto ties = transform_ties(tvs, keep);
                const auto cons = transform_consensus(tvs, keep, 2);
                for (const auto& [name, ref] : tvs[0].delta) {
                    std::vector<std::vector<float>> in;
                    for (const auto& tv : tvs) in.push_back(tv.delta.at(name).data);
                    const auto want_ties = oracle::ties(in, keep);
                    const auto want_cons = oracle::consensus(in, keep, 2);
                    cons_ok = cons_ok && cons.mask.at(name).data == want_cons.mask;
                    for (std::size_t t = 0; t < tvs.size(); ++t) {
                        ties_ok = ties_ok && ties[t].delta.at(name).data == want_ties[t];
                        cons_ok = cons_ok && cons.pruned[t].delta.at(name).data == want_cons.pruned[t];
                    }
                    ++compared;
                }
            }
            for (const auto& [top, bottom] : {std::pair{0.02, 0.8}, {0.1, 0.5}, {0.25, 0.25}, {0.0, 0.0}, {0.5, 0.3}}) {
                const auto out = transform_breadcrumbs(tvs[0], top, bottom);
                for (const auto& [name, t] : tvs[0].delta)
                    bc_ok = bc_ok && out.delta.at(name).data == oracle::breadcrumbs(t.data, top, bottom);
            }
        }
    }
    o.require(ties_ok, "TIES oracle");
    o.require(bc_ok, "Breadcrumbs oracle");
    o.require(cons_ok, "Consensus oracle");

    double star_energy = 0.0, star_recon = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const TaskVector tv{"t", testing::random_map(500 + s, 1.0, 7, 6, 4)};
        for (double eta : {0.2, 0.4, 0.8}) {
            const auto out = transform_star(tv, eta);
            for (const auto& [name, t] : tv.delta) {
                if (!t.is_matrix()) continue;
                const double e0 = as_matrix(t).squaredNorm(), e1 = as_matrix(out.delta.at(name)).squaredNorm();
                star_energy = std::max(star_energy, std::fabs(e1 - e0) / e0);
            }
        }
        const auto full = transform_star(tv, 1.0);
        for (const auto& [name, t] : tv.delta)
            if (t.is_matrix()) star_recon = std::max(star_recon, (as_matrix(full.delta.at(name)) - as_matrix(t)).norm());
    }
    o.require(star_energy <= 1e-6, "STAR energy");
    o.require(star_recon <= 1e-5, "STAR eta=1 reconstruction");

    double tsv_recon = 0.0, tsv_orth = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto tvs = random_tvs(1, 600 + s, 1.0);
        const auto out = transform_tsv(tvs, TsvRankPolicy::per_task_floor_div_T);
        for (const auto& [name, t] : tvs[0].delta)
            if (t.is_matrix()) tsv_recon = std::max(tsv_recon, (as_matrix(out.at(name)) - as_matrix(t)).norm());
        for (const auto& [name, t] : tvs[0].delta) {
            if (!t.is_matrix()) continue;
            const auto f = tsv_factors({as_matrix(t)}, TsvRankPolicy::per_task_floor_div_T);
            const auto k = f.u_orth.cols();
            tsv_orth = std::max(tsv_orth, (f.u_orth.transpose() * f.u_orth - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff());
            tsv_orth = std::max(tsv_orth, (f.v_orth.transpose() * f.v_orth - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff());
        }
    }
    o.require(tsv_recon <= 1e-5, "TSV T=1 reconstruction");
    o.require(tsv_orth <= 1e-5, "TSV orthonormality");
    o.detail << compared << " tensors vs TIES/Consensus oracles, Breadcrumbs on 5 cut pairs; STAR energy rel err "
             << star_energy << ", recon " << star_recon << "; TSV recon " << tsv_recon << ", orth " << tsv_orth;
}

// --- 3 ----------------------------------------------------------------------
void tap_semantics(Outcome& o) {
    const auto& bench = testing::default_bench();
    ToyFeatureProvider provider(bench, kDefaultSamples, 0);
    double worst_self = 0.0;
    for (std::size_t t = 0; t < bench.tasks.size(); ++t) {
        const auto& id = bench.tasks[t].task_id;
        const auto teacher = provider.teacher(id);
        const auto self = provider.merged(bench.finetuned[t], id, 0);
        for (auto m : {Metric::l1, Metric::l2, Metric::cosine}) worst_self = std::max(worst_self, tap_task(self, teacher, m));
    }
    o.require(worst_self == 0.0, "TAP_t(theta_t) = 0");

    CounterRng rng(2024, "acceptance-select");
    std::size_t agree = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<Candidate> cands;
        std::vector<double> avg;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = trial % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 2.0);
            cands.push_back({MergeSpec{MergeMethod::ta, static_cast<double>(i), {}}, {}});
            cands.back().tap.average = v;
            avg.push_back(v);
        }
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (avg[i] < avg[best]) best = i;
        agree += std::get<double>(select(cands).lambda) == static_cast<double>(best);
    }
    o.require(agree == 1000, "select vs exhaustive argmin");
    const SweepConfig defaults = sweep_config_from_json({{"method", "ta"}, {"grid", {{"lambda", {1.0}}}}});
    o.require(kDefaultMetric == Metric::l2 && kDefaultSamples == 128, "library defaults");
    o.require(defaults.metric == Metric::l2 && defaults.n_samples == 128, "sweep config defaults");
    o.detail << "self TAP max " << worst_self << " over 3 tasks x 3 metrics; select agreed on " << agree
             << "/1000 random sets; defaults metric=" << metric_name(defaults.metric) << " N=" << defaults.n_samples;
}

// --- 4, 5, 6, 8 -------------------------------------------------------------
SweepConfig lambda_grid(EvalMode mode, std::size_t n, Metric metric) {
    SweepConfig c;
    for (int i = 0; i <= 10; ++i) c.lambdas.push_back(i / 10.0);
    c.eval_mode = mode;
    c.n_samples = n;
    c.metric = metric;
    return c;
}

const SweepReport& eval_sweep() {
    static const SweepReport report = [] {
        const auto& bench = testing::default_bench();
        ToyFeatureProvider provider(bench, kDefaultSamples, 0);
        return run_sweep(bench.base, testing::bench_task_vectors(bench),
                         lambda_grid(EvalMode::tap_and_eval, kDefaultSamples, Metric::l2), provider, &bench);
    }();
    return report;
}

std::vector<double> column(const SweepReport& r, const std::function<double(const SweepRow&)>& f) {
    std::vector<double> out;
    for (const auto& row : r.rows) out.push_back(f(row));
    return out;
}

void correlation(Outcome& o) {
    const auto& r = eval_sweep();
    const auto tap = column(r, [](const SweepRow& row) { return row.tap.average; });
    const auto perf = column(r, [](const SweepRow& row) { return *row.normalized_performance; });
    const double rho = testing::spearman(tap, perf);
    const std::size_t by_tap = testing::argmin(tap), by_eval = testing::argmax(perf);
    const double gap = perf[by_eval] - perf[by_tap];
    o.require(r.rows.size() == 11, "11-point grid");
    o.require(rho <= -0.8, "Spearman <= -0.8");
    o.require(gap <= 0.02, "TAP-selected within 2% of eval-selected");
    o.require(by_tap == r.selected_by_tap && by_eval == *r.selected_by_eval, "report selections");
    o.detail << "Spearman(TAP, norm perf) = " << rho << "; TAP picks lambda=" << r.config.lambdas[by_tap] << " ("
             << perf[by_tap] << "), eval picks lambda=" << r.config.lambdas[by_eval] << " (" << perf[by_eval]
             << "), gap " << gap;
}

void ablations(Outcome& o) {
    const auto& bench = testing::default_bench();
    const auto tvs = testing::bench_task_vectors(bench);
    const auto argmin_for = [&](std::size_t n, Metric m) {
        ToyFeatureProvider provider(bench, n, 0);
        return run_sweep(bench.base, tvs, lambda_grid(EvalMode::tap_only, n, m), provider, nullptr).selected_by_tap;
    };
    std::vector<std::size_t> by_n;
    for (std::size_t n : {16u, 32u, 64u, 128u}) by_n.push_back(argmin_for(n, Metric::l2));
    std::vector<std::size_t> by_metric;
    for (auto m : {Metric::l1, Metric::l2, Metric::cosine}) by_metric.push_back(argmin_for(128, m));
    bool same_n = true;
    for (auto i : by_n) same_n = same_n && i == by_n.front();
    const auto [lo, hi] = std::minmax_element(by_metric.begin(), by_metric.end());
    o.require(same_n, "argmin identical across N");
    o.require(*hi - *lo <= 1, "metrics within one grid step");
    o.detail << "argmin index for N=16/32/64/128: " << by_n[0] << "/" << by_n[1] << "/" << by_n[2] << "/" << by_n[3]
             << "; l1/l2/cosine: " << by_metric[0] << "/" << by_metric[1] << "/" << by_metric[2];
}

void frozen_decoders(Outcome& o) {
    const auto& r = eval_sweep();
    const auto tap = column(r, [](const SweepRow& row) { return row.tap.average; });
    const auto perf = column(r, [](const SweepRow& row) { return *row.normalized_performance; });
    const auto frozen = column(r, [](const SweepRow& row) { return *row.frozen_normalized_performance; });
    const double rho_frozen = testing::spearman(frozen, perf), rho_tap = testing::spearman(tap, perf);
    o.require(std::isfinite(rho_frozen) && std::isfinite(rho_tap), "finite correlations");
    o.require(std::fabs(rho_frozen) < std::fabs(rho_tap), "|rho(frozen)| < |rho(TAP)|");
    o.detail << "|Spearman(frozen, retrained)| = " << std::fabs(rho_frozen)
             << " vs |Spearman(TAP, retrained)| = " << std::fabs(rho_tap);
}

void cost_accounting(Outcome& o) {
    const auto& bench = testing::default_bench();
    const auto tvs = testing::bench_task_vectors(bench);
    const std::uint64_t T = tvs.size(), C = 11, N = kDefaultSamples;
    ToyFeatureProvider provider(bench, N, 0);
    const auto tap_only = run_sweep(bench.base, tvs, lambda_grid(EvalMode::tap_only, N, Metric::l2), provider, nullptr);
    const auto& full = eval_sweep();
    o.require(tap_only.cost.decoder_trainings == 0, "tap_only trains no decoders");
    o.require(full.cost.decoder_trainings >= C * T, "tap_and_eval trains >= 11 T decoders");
    o.require(tap_only.cost.encoder_forward_passes == T * N * (1 + C), "tap_only forward passes");
    o.require(full.cost.encoder_forward_passes == T * N * (1 + C), "tap_and_eval forward passes");
    o.detail << "tap_only: " << tap_only.cost.decoder_trainings << " decoder trainings, "
             << tap_only.cost.encoder_forward_passes << " forward passes; tap_and_eval: " << full.cost.decoder_trainings
             << " decoder trainings, " << full.cost.encoder_forward_passes << " forward passes; formula T*N*(1+C) = "
             << T * N * (1 + C);
}

// --- 7 ----------------------------------------------------------------------
void adamerging(Outcome& o) {
    const auto& bench = testing::default_bench();
    const auto tvs = testing::bench_task_vectors(bench);
    std::vector<toy::Encoder> teachers;
    for (const auto& w : bench.finetuned) teachers.push_back(toy::to_encoder(w));

    CounterRng rng(77, "acceptance-fd");
    double worst = 0.0;
    std::size_t probes = 0;
    for (auto structure : {ada::LambdaStructure::per_task, ada::LambdaStructure::per_task_per_layer}) {
        const auto p = ada::make_problem(bench.base, tvs, structure);
        const auto k = static_cast<Eigen::Index>(p.num_coefficients());
        for (int i = 0; i < 20; ++i, ++probes) {
            const auto batch = ada::draw_batch(bench.tasks, teachers, 16, 1000 + static_cast<std::uint64_t>(i), 0);
            Eigen::VectorXd lambda(k);
            for (Eigen::Index j = 0; j < k; ++j) lambda(j) = rng.uniform(-0.25, 1.25);
            ada::EmaState ema{ada::RunningStats{}, std::vector<ada::RunningStats>(p.num_tasks())};
            const auto enc = ada::merged_encoder(p, lambda);
            std::vector<Eigen::MatrixXd> student;
            for (const auto& x : batch.inputs) student.push_back(toy::forward(enc, x).features());
            ema.update(student, batch.teacher_features, 0.99);
            const auto g = ada::tap_loss_grad(p, lambda, batch, ema, 1e-5).gradient;
            const double h = 1e-4;
            for (Eigen::Index j = 0; j < k; ++j) {
                Eigen::VectorXd up = lambda, dn = lambda;
                up(j) += h;
                dn(j) -= h;
                const double fd =
                    (ada::tap_loss(p, up, batch, ema, 1e-5).loss - ada::tap_loss(p, dn, batch, ema, 1e-5).loss) / (2 * h);
                worst = std::max(worst, std::fabs(g(j) - fd) / std::max({std::fabs(g(j)), std::fabs(fd), 1e-8}));
            }
        }
    }
    o.require(worst <= 1e-4, "gradient vs central differences");

    const auto p = ada::make_problem(bench.base, tvs, ada::LambdaStructure::per_task);
    const ada::AdaConfig config;  // lr 1e-3, batch 16, 500 iterations, lambda = 1/T
    const auto result = ada::optimize(p, bench.tasks, bench.finetuned, config);
    bool finite = result.trace.rows.size() == 500;
    for (const auto& row : result.trace.rows) finite = finite && std::isfinite(row.total_loss);
    const double first = result.trace.rows.front().total_loss, last = result.trace.rows.back().total_loss;
    o.require(finite, "finite 500-row trace");
    o.require(last < first, "final loss below initial");
    o.require(result.trace.rows.front().lambda->isApproxToConstant(1.0 / 3.0), "lambda initialised to 1/T");
    o.detail << probes << " probes, max rel err " << worst << "; 500-step loss " << first << " -> " << last;
}

// --- 9 ----------------------------------------------------------------------
void normavg(Outcome& o) {
    WeightMap a, b, c;
    a.emplace("layer0.weight", Tensor({2, 2}, {3.0f, 0.0f, 0.0f, 4.0f}));
    a.emplace("layer0.bias", Tensor({2}, {0.0f, 0.0f}));
    a.emplace("layer1.weight", Tensor({1, 2}, {1.0f, 0.0f}));
    b.emplace("layer0.weight", Tensor({2, 2}, {0.0f, 1.0f, 0.0f, 0.0f}));
    b.emplace("layer0.bias", Tensor({2}, {0.0f, 1.0f}));
    b.emplace("layer1.weight", Tensor({1, 2}, {6.0f, 8.0f}));
    c.emplace("layer0.weight", Tensor({2, 2}, {-2.0f, 0.0f, 0.0f, 0.0f}));
    c.emplace("layer0.bias", Tensor({2}, {0.0f, 0.0f}));
    c.emplace("layer1.weight", Tensor({1, 2}, {0.0f, 0.5f}));
    const std::vector<TaskVector> hand = {{"a", a}, {"b", b}, {"c", c}};
    const auto bench_tvs = testing::bench_task_vectors(testing::default_bench());

    const auto g = LayerGrouping::strip_suffix(1);
    double worst = 0.0;
    std::size_t checked = 0;
    for (const auto* tvs : {&hand, &bench_tvs}) {
        const auto coef = lambda_normavg(*tvs, g);
        std::map<std::string, double> smallest;
        for (const auto& tv : *tvs)
            for (const auto& [layer, n] : layer_norms(tv.delta, g))
                smallest[layer] = smallest.contains(layer) ? std::min(smallest[layer], n) : n;
        for (const auto& tv : *tvs) {
            // Norms of the rescaled task vectors, measured from the rescaled tensors.
            WeightMap scaled = tv.delta;
            for (auto& [name, t] : scaled) {
                const double f = coef.at(tv.task_id).at(g.group_of(name));
                for (auto& v : t.data) v = static_cast<float>(f * v);
            }
            for (const auto& [layer, n] : layer_norms(scaled, g)) {
                worst = std::max(worst, std::fabs(n - smallest[layer]) / smallest[layer]);
                ++checked;
            }
        }
    }
    // Hand values: layer0 norms 5, sqrt(2), 2 and layer1 norms 1, 10, 0.5.
    const auto hc = lambda_normavg(hand, g);
    o.require(std::fabs(hc.at("a").at("layer0") - std::sqrt(2.0) / 5.0) < 1e-12 && hc.at("b").at("layer0") == 1.0 &&
                  std::fabs(hc.at("b").at("layer1") - 0.05) < 1e-12,
              "hand-built coefficients");
    o.require(worst <= 1e-6, "per-layer norms equal the minimum");
    o.detail << checked << " (task, layer) norms on hand-built and toy-bench vectors, max rel err " << worst;
}

// --- 10 ---------------------------------------------------------------------
std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return out;
}

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = tapmerge::cli::run(args, o, e);
    if (out) *out = o.str();
    return code;
}

void determinism(Outcome& o) {
    testing::TempDir root("acceptance");
    std::ofstream(root / "sweep.json") << R"({"method": "ties", "grid": {"lambda": [0.2, 0.6, 1.0], "keep_fraction": [0.2, 0.5]}, "eval_mode": "tap_and_eval"})";
    std::ofstream(root / "sweep_ta.json") << R"({"method": "ta", "grid": {"lambda": [0.0, 0.5, 1.0]}, "n_samples": 32})";

    // One full pass of every subcommand into `dir` with the given job count.
    const auto pass = [&](const std::string& dir, const std::string& jobs) {
        const fs::path d = root / dir;
        const std::string b = (d / "bench").string();
        std::vector<std::string> stdout_text(7);
        int bad = 0;
        bad += cli({"bench", "--seed", "0", "--tasks", "3", "--out-dir", b}, &stdout_text[0]) != 0;
        const auto in = [&](const std::string& f) { return (fs::path(b) / f).string(); };
        bad += cli({"merge", "--base", in("base.mkt"), "--task", "x=" + in("task0.mkt"), "--task", "y=" + in("task1.mkt"),
                    "--method", "tsv", "--lambda", "0.4", "--out", (d / "merged.mkt").string()},
                   &stdout_text[1]) != 0;
        bad += cli({"sweep", "--config", (root / "sweep.json").string(), "--bench-manifest", in("manifest.json"), "--out",
                    (d / "sweep").string(), "--jobs", jobs},
                   &stdout_text[2]) != 0;
        std::vector<std::string> provider = {"sweep", "--config", (root / "sweep_ta.json").string(), "--feature-provider",
                                             TAPMERGE_TOY_PROVIDER, "--base", in("base.mkt"), "--out",
                                             (d / "provider").string(), "--jobs", jobs};
        for (const char* t : {"task0", "task1", "task2"}) {
            provider.insert(provider.end(), {"--task", std::string(t) + "=" + in(std::string(t) + ".mkt")});
            provider.insert(provider.end(), {"--samples", std::string(t) + "=" + in(std::string(t) + "_train_x.fts")});
        }
        bad += cli(provider, &stdout_text[3]) != 0;
        bad += cli({"analyze", "--base", in("base.mkt"), "--task", "x=" + in("task0.mkt"), "--task", "y=" + in("task1.mkt"),
                    "--scope", "per-layer", "--out", (d / "analyze").string()},
                   &stdout_text[4]) != 0;
        bad += cli({"tap", "--merged-features", "task0=" + in("task0_train_x.fts"), "--teacher-features",
                    "task0=" + in("task0_train_x.fts"), "--metric", "l1", "--out", (d / "tap.json").string()},
                   &stdout_text[5]) != 0;
        bad += cli({"adamerge", "--bench-manifest", in("manifest.json"), "--seed", "3", "--out", (d / "ada").string()},
                   &stdout_text[6]) != 0;
        // Summaries mention output paths; compare them with the directory name masked.
        std::string joined;
        for (auto& s : stdout_text) {
            for (std::size_t pos; (pos = s.find(d.string())) != std::string::npos;) s.replace(pos, d.string().size(), "<out>");
            joined += s;
        }
        return std::make_tuple(bad, snapshot(d), joined);
    };
    const auto [bad1, snap1, out1] = pass("run1", "1");
    const auto [bad2, snap2, out2] = pass("run2", "1");
    const auto [bad3, snap3, out3] = pass("run3", "4");
    o.require(bad1 + bad2 + bad3 == 0, "all invocations exit 0");
    o.require(snap1 == snap2 && out1 == out2, "byte-identical across runs");
    o.require(snap1 == snap3 && out1 == out3, "byte-identical across --jobs");

    // Bitwise round trips.
    const auto& bench = testing::default_bench();
    bool round_trip = true;
    for (const auto* m : {&bench.base, &bench.finetuned[0]}) {
        const auto bytes = encode_checkpoint(*m);
        const auto back = decode_checkpoint(bytes);
        round_trip = round_trip && bitwise_equal(*m, back) && encode_checkpoint(back) == bytes;
    }
    ToyFeatureProvider provider(bench, 128, 0);
    const auto f = provider.teacher(bench.tasks[0].task_id);
    const auto fb = encode_features(f);
    const auto g = decode_features(fb, f.task_id);
    round_trip = round_trip && g.sample_digest == f.sample_digest && g.rows == f.rows && g.cols == f.cols &&
                 std::memcmp(g.data.data(), f.data.data(), f.data.size() * 4) == 0 && encode_features(g) == fb;
    for (const auto& [name, bytes] : snap1)
        if (name.size() > 4 && name.substr(name.size() - 4) == ".mkt")
            round_trip = round_trip && encode_checkpoint(decode_checkpoint(bytes)) == bytes;
        else if (name.size() > 4 && name.substr(name.size() - 4) == ".fts")
            round_trip = round_trip && encode_features(decode_features(bytes, "x")) == bytes;
    o.require(round_trip, "bitwise round trips");
    o.detail << "7 subcommands x 3 passes (--jobs 1, 1, 4): " << snap1.size()
             << " output files byte-identical; MKT1 and FTS1 files round-trip bitwise";
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double limit_s;
        void (*run)(Outcome&);
    };
    const Criterion criteria[] = {
        {1, "merging identities", 10, merging_identities},
        {2, "transform oracles", 30, transform_oracles},
        {3, "TAP semantics", 10, tap_semantics},
        {4, "desk-scale correlation", 120, correlation},
        {5, "TAP ablations", 120, ablations},
        {6, "frozen-decoder finding", 120, frozen_decoders},
        {7, "AdaMerging with TAP", 180, adamerging},
        {8, "cost accounting", 120, cost_accounting},
        {9, "NormAvg", 5, normavg},
        {10, "determinism and formats", 60, determinism},
    };
    // Shared fixtures are built up front so no criterion is billed for them.
    const auto setup_start = std::chrono::steady_clock::now();
    testing::default_bench();
    eval_sweep();
    const double setup_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - setup_start).count();
    std::cout << "setup: seeded bench and 11-point evaluated sweep built in " << setup_s << " s\n";

    int failures = 0;
    for (const auto& c : criteria) {
        Outcome o;
        const auto start = std::chrono::steady_clock::now();
        try {
            c.run(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "exception: " << e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (secs >= c.limit_s) {
            o.pass = false;
            o.detail << "; runtime over the " << c.limit_s << " s limit";
        }
        failures += !o.pass;
        std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " [" << c.name << ", " << secs
                  << " s] " << o.detail.str() << "\n";
    }
    return failures == 0 ? 0 : 1;
}
