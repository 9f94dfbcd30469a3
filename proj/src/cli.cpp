#include "tapmerge/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <map>
#include <sstream>

#include "tapmerge/ada_tap.hpp"
#include "tapmerge/error.hpp"
#include "tapmerge/merge_methods.hpp"
#include "tapmerge/sweep.hpp"
#include "tapmerge/tap.hpp"
#include "tapmerge/task_vector.hpp"
#include "tapmerge/tensor_store.hpp"
#include "tapmerge/toy_bench.hpp"
#include "tapmerge/util.hpp"

namespace fs = std::filesystem;

namespace tapmerge::cli {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
    if (dynamic_cast<const InvalidArgument*>(&e)) return kUsage;
    if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IoError*>(&e)) return kData;
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kData;
    return kData;
}

namespace {

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return "numerical";
    if (dynamic_cast<const InvalidArgument*>(&e)) return "usage";
    if (dynamic_cast<const SchemaMismatch*>(&e)) return "schema_mismatch";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    return "error";
}

// "name=path" pairs, in the order given; duplicate names are rejected.
std::vector<std::pair<std::string, std::string>> parse_pairs(const std::vector<std::string>& items,
                                                             const std::string& flag) {
    std::vector<std::pair<std::string, std::string>> out;
    std::map<std::string, int> seen;
    for (const auto& item : items) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == item.size())
            throw InvalidArgument(flag + " expects name=value, got '" + item + "'");
        const std::string name = item.substr(0, eq);
        if (seen[name]++) throw InvalidArgument(flag + " names '" + name + "' twice");
        out.emplace_back(name, item.substr(eq + 1));
    }
    return out;
}

nlohmann::json parse_value(const std::string& text) {
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) return text;
    return j;
}

nlohmann::json read_json(const fs::path& path) {
    const auto bytes = read_file(path);
    auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw FormatError(path.string() + ": not valid JSON");
    return j;
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::vector<TaskVector> load_task_vectors(const WeightMap& base,
                                          const std::vector<std::pair<std::string, std::string>>& tasks) {
    std::vector<TaskVector> tvs;
    for (const auto& [name, path] : tasks) tvs.push_back(compute_task_vector(base, load_checkpoint(path), name));
    return tvs;
}

std::vector<TaskVector> bench_task_vectors(const toy::Bench& bench) {
    std::vector<TaskVector> tvs;
    for (std::size_t t = 0; t < bench.tasks.size(); ++t)
        tvs.push_back(compute_task_vector(bench.base, bench.finetuned[t], bench.tasks[t].task_id));
    return tvs;
}

struct Options {
    // merge
    std::string base;
    std::vector<std::string> tasks;
    std::string method = "ta";
    std::string lambda = "1";
    std::vector<std::string> mu;
    std::string out;
    // sweep
    std::string config;
    std::string bench_manifest;
    std::string feature_provider;
    std::vector<std::string> samples;
    unsigned jobs = 1;
    bool record_time = false;
    std::uint64_t seed = 0;
    // tap
    std::vector<std::string> merged_features;
    std::vector<std::string> teacher_features;
    std::string metric = "l2";
    // analyze
    std::string scope = "global";
    // bench
    std::size_t num_tasks = 3;
    std::string out_dir;
    // adamerge
    std::size_t iterations = 500;
    double lr = 1e-3;
    std::size_t batch = 16;
    std::string structure = "per_task";
    double ema_decay = 0.99;
    std::size_t snapshot_every = 10;
};

int cmd_merge(const Options& o, std::ostream& out) {
    const WeightMap base = load_checkpoint(o.base);
    const auto tvs = load_task_vectors(base, parse_pairs(o.tasks, "--task"));
    nlohmann::json mu = nlohmann::json::object();
    for (const auto& [k, v] : parse_pairs(o.mu, "--mu")) mu[k] = parse_value(v);
    nlohmann::json lambda = parse_value(o.lambda);
    if (lambda.is_string()) throw InvalidArgument("--lambda must be a number or a JSON object");
    const auto spec = spec_from_json({{"method", o.method}, {"lambda", lambda}, {"mu", mu}});
    const auto merged = merge(base, tvs, spec);
    save_checkpoint(merged.weights, o.out);
    out << dump({{"out", o.out}, {"spec", spec_to_json(merged.spec)}, {"tasks", merged.task_ids}});
    return kSuccess;
}

int cmd_sweep(const Options& o, const CLI::App& sub, std::ostream& out) {
    auto config = sweep_config_from_json(read_json(o.config));
    if (sub.count("--seed")) config.seed = o.seed;
    const fs::path out_dir = o.out;
    fs::create_directories(out_dir);
    SweepOptions options;
    options.jobs = o.jobs;
    options.record_time = o.record_time;

    SweepReport report;
    if (!o.bench_manifest.empty()) {
        const auto bench = toy::load_bench(o.bench_manifest);
        ToyFeatureProvider features(bench, config.n_samples, config.seed);
        report = run_sweep(bench.base, bench_task_vectors(bench), config, features, &bench, options);
    } else {
        if (o.base.empty() || o.tasks.empty() || o.samples.empty())
            throw InvalidArgument("--feature-provider needs --base, --task and --samples");
        if (config.eval_mode == EvalMode::tap_and_eval)
            throw InvalidArgument("evaluation requested without a trainable benchmark");
        const WeightMap base = load_checkpoint(o.base);
        const auto task_pairs = parse_pairs(o.tasks, "--task");
        std::map<std::string, ExternalFeatureProvider::TaskInputs> inputs;
        for (const auto& [name, path] : task_pairs) inputs[name].teacher_checkpoint = path;
        for (const auto& [name, path] : parse_pairs(o.samples, "--samples")) {
            if (!inputs.count(name)) throw InvalidArgument("--samples names unknown task '" + name + "'");
            inputs[name].samples = path;
        }
        for (const auto& [name, in] : inputs)
            if (in.samples.empty()) throw InvalidArgument("no --samples given for task '" + name + "'");
        const fs::path work = out_dir / "work";
        ExternalFeatureProvider features(o.feature_provider, work, inputs, config.n_samples);
        report = run_sweep(base, load_task_vectors(base, task_pairs), config, features, nullptr, options);
        fs::remove_all(work);
    }
    write_file_atomic(out_dir / "report.json", dump(sweep_report_to_json(report)));
    write_file_atomic(out_dir / "report.csv", sweep_report_csv(report));
    nlohmann::json summary = {{"candidates", report.rows.size()},
                              {"selected_by_tap", report.selected_by_tap},
                              {"encoder_forward_passes", report.cost.encoder_forward_passes},
                              {"decoder_trainings", report.cost.decoder_trainings}};
    if (report.selected_by_eval) summary["selected_by_eval"] = *report.selected_by_eval;
    out << dump(summary);
    return kSuccess;
}

int cmd_tap(const Options& o, std::ostream& out) {
    const Metric metric = parse_metric(o.metric);
    std::vector<FeatureSet> merged, teachers;
    for (const auto& [name, path] : parse_pairs(o.merged_features, "--merged-features"))
        merged.push_back(load_features(path, name));
    for (const auto& [name, path] : parse_pairs(o.teacher_features, "--teacher-features"))
        teachers.push_back(load_features(path, name));
    if (merged.size() != teachers.size())
        throw InvalidArgument("--merged-features and --teacher-features must name the same tasks");
    const auto report = tap_report(merged, teachers, metric);
    const std::string text = dump(tap_report_to_json(report));
    if (!o.out.empty()) write_file_atomic(o.out, text);
    out << text;
    return kSuccess;
}

int cmd_analyze(const Options& o, std::ostream& out) {
    NormScope scope;
    if (o.scope == "global") scope = NormScope::global;
    else if (o.scope == "per-layer") scope = NormScope::per_layer;
    else throw InvalidArgument("--scope must be global or per-layer");
    const WeightMap base = load_checkpoint(o.base);
    const auto tvs = load_task_vectors(base, parse_pairs(o.tasks, "--task"));
    const fs::path dir = o.out;
    fs::create_directories(dir);
    write_file_atomic(dir / "norms.csv", norms_csv(norms(tvs, scope)));
    nlohmann::json summary = {{"norms", (dir / "norms.csv").string()}};
    if (tvs.size() >= 2) {
        write_file_atomic(dir / "cosine.csv", cosine_csv(cosine_analysis(tvs)));
        summary["cosine"] = (dir / "cosine.csv").string();
    }
    out << dump(summary);
    return kSuccess;
}

int cmd_bench(const Options& o, std::ostream& out) {
    toy::BenchConfig config;
    config.seed = o.seed;
    config.num_tasks = o.num_tasks;
    const auto bench = toy::make_bench(config);
    const auto manifest = toy::write_bench(bench, o.out_dir);
    out << dump({{"manifest", manifest.string()}, {"tasks", bench.tasks.size()}});
    return kSuccess;
}

int cmd_adamerge(const Options& o, std::ostream& out) {
    const auto bench = toy::load_bench(o.bench_manifest);
    ada::AdaConfig config;
    config.structure = ada::parse_structure(o.structure);
    config.iterations = o.iterations;
    config.lr = o.lr;
    config.batch_size = o.batch;
    config.ema_decay = o.ema_decay;
    config.snapshot_every = o.snapshot_every;
    config.seed = o.seed;
    const auto problem = ada::make_problem(bench.base, bench_task_vectors(bench), config.structure);
    const fs::path dir = o.out;
    fs::create_directories(dir);
    ada::AdaResult result;
    try {
        result = ada::optimize(problem, bench.tasks, bench.finetuned, config);
    } catch (const ada::Diverged& e) {
        write_file_atomic(dir / "trace.csv", ada::trace_csv(e.trace));
        throw;
    }
    MergeSpec spec;
    spec.method = MergeMethod::ta;
    spec.lambda = ada::to_merge_lambda(problem, result.lambda);
    const auto merged = merge(bench.base, bench_task_vectors(bench), spec);
    save_checkpoint(merged.weights, dir / "merged.mkt");
    write_file_atomic(dir / "trace.csv", ada::trace_csv(result.trace));
    const auto& rows = result.trace.rows;
    const nlohmann::json report = {
        {"spec", spec_to_json(spec)},
        {"structure", ada::structure_name(config.structure)},
        {"iterations", config.iterations},
        {"lr", config.lr},
        {"batch_size", config.batch_size},
        {"ema_decay", config.ema_decay},
        {"normalization", "per-dimension standardization, running mean and variance"},
        {"seed", config.seed},
        {"initial_loss", rows.front().total_loss},
        {"final_loss", rows.back().total_loss}};
    write_file_atomic(dir / "adamerge.json", dump(report));
    out << dump(report);
    return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Model merging toolkit with task alignment scoring", "tapmerge"};
    app.require_subcommand(1);
    bool json_errors = false;
    app.add_flag("--json-errors", json_errors, "Report errors as a JSON object on stderr");
    Options o;

    auto* merge_cmd = app.add_subcommand("merge", "Merge fine-tuned checkpoints into the base");
    merge_cmd->add_option("--base", o.base, "Base checkpoint (MKT1)")->required();
    merge_cmd->add_option("--task", o.tasks, "Fine-tuned checkpoint as name=path (repeatable)")->required();
    merge_cmd->add_option("--method", o.method, "avg, ta, ties, breadcrumbs, consensus, lines, star, tsv, normavg")
        ->capture_default_str();
    merge_cmd->add_option("--lambda", o.lambda, "Scalar or JSON object (per task or per task and layer)")
        ->capture_default_str();
    merge_cmd->add_option("--mu", o.mu, "Transform hyperparameter as key=value (repeatable)");
    merge_cmd->add_option("--out", o.out, "Output checkpoint")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "Score a hyperparameter grid with TAP");
    sweep_cmd->add_option("--config", o.config, "Sweep configuration (JSON)")->required();
    auto* manifest_opt = sweep_cmd->add_option("--bench-manifest", o.bench_manifest, "Toy bench manifest");
    auto* provider_opt =
        sweep_cmd->add_option("--feature-provider", o.feature_provider, "Executable: <ckpt> <samples> <features>");
    manifest_opt->excludes(provider_opt);
    sweep_cmd->add_option("--base", o.base, "Base checkpoint (with --feature-provider)");
    sweep_cmd->add_option("--task", o.tasks, "Fine-tuned checkpoint as name=path (with --feature-provider)");
    sweep_cmd->add_option("--samples", o.samples, "FTS1 input rows as name=path (with --feature-provider)");
    sweep_cmd->add_option("--out", o.out, "Report directory")->required();
    sweep_cmd->add_option("--jobs", o.jobs, "Parallel candidate workers")->capture_default_str()->check(
        CLI::Range(1u, 256u));
    sweep_cmd->add_option("--seed", o.seed, "Overrides the config's sampling seed");
    sweep_cmd->add_flag("--record-time", o.record_time, "Add wall_clock_ms to the report (not reproducible)");

    auto* tap_cmd = app.add_subcommand("tap", "Compute TAP from precomputed features");
    tap_cmd->add_option("--merged-features", o.merged_features, "Merged-model features as task=path (repeatable)")
        ->required();
    tap_cmd->add_option("--teacher-features", o.teacher_features, "Fine-tuned features as task=path (repeatable)")
        ->required();
    tap_cmd->add_option("--metric", o.metric, "l1, l2 or cosine")->capture_default_str();
    tap_cmd->add_option("--out", o.out, "Report file (JSON)");

    auto* analyze_cmd = app.add_subcommand("analyze", "Task-vector norms and cosine similarities");
    analyze_cmd->add_option("--base", o.base, "Base checkpoint")->required();
    analyze_cmd->add_option("--task", o.tasks, "Fine-tuned checkpoint as name=path (repeatable)")->required();
    analyze_cmd->add_option("--scope", o.scope, "global or per-layer")->capture_default_str();
    analyze_cmd->add_option("--out", o.out, "Output directory")->required();

    auto* bench_cmd = app.add_subcommand("bench", "Generate the toy benchmark");
    bench_cmd->add_option("--seed", o.seed, "Benchmark seed")->capture_default_str();
    bench_cmd->add_option("--tasks", o.num_tasks, "Number of tasks")->capture_default_str();
    bench_cmd->add_option("--out-dir", o.out_dir, "Output directory")->required();

    auto* ada_cmd = app.add_subcommand("adamerge", "Learn merging coefficients by minimizing TAP");
    ada_cmd->add_option("--bench-manifest", o.bench_manifest, "Toy bench manifest")->required();
    ada_cmd->add_option("--iterations", o.iterations, "Adam iterations")->capture_default_str();
    ada_cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
    ada_cmd->add_option("--batch", o.batch, "Samples per task per iteration")->capture_default_str();
    ada_cmd->add_option("--structure", o.structure, "per_task or per_task_per_layer")->capture_default_str();
    ada_cmd->add_option("--ema-decay", o.ema_decay, "Feature statistics decay")->capture_default_str();
    ada_cmd->add_option("--snapshot-every", o.snapshot_every, "Iterations between lambda snapshots")
        ->capture_default_str();
    ada_cmd->add_option("--seed", o.seed, "Mini-batch sampling seed")->capture_default_str();
    ada_cmd->add_option("--out", o.out, "Output directory")->required();

    std::vector<std::string> storage = {"tapmerge"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : storage) argv.push_back(s.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
            app.exit(e, out, err);
            return kSuccess;
        }
        if (json_errors) {
            err << nlohmann::json{{"error", {{"kind", "usage"}, {"message", e.what()}, {"exit_code", kUsage}}}}.dump()
                << "\n";
        } else {
            app.exit(e, out, err);
        }
        return kUsage;
    }

    try {
        if (*merge_cmd) return cmd_merge(o, out);
        if (*sweep_cmd) {
            if (o.bench_manifest.empty() == o.feature_provider.empty())
                throw InvalidArgument("sweep needs exactly one of --bench-manifest or --feature-provider");
            return cmd_sweep(o, *sweep_cmd, out);
        }
        if (*tap_cmd) return cmd_tap(o, out);
        if (*analyze_cmd) return cmd_analyze(o, out);
        if (*bench_cmd) return cmd_bench(o, out);
        if (*ada_cmd) return cmd_adamerge(o, out);
        throw InvalidArgument("no subcommand given");
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        if (json_errors)
            err << nlohmann::json{{"error", {{"kind", error_kind(e)}, {"message", e.what()}, {"exit_code", code}}}}.dump()
                << "\n";
        else
            err << "tapmerge: " << e.what() << "\n";
        return code;
    }
}

}  // namespace tapmerge::cli
