#include "tapmerge/sweep.hpp"

#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <exception>
#include <set>
#include <thread>

#include "tapmerge/error.hpp"
#include "tapmerge/util.hpp"

extern char** environ;

namespace tapmerge {

std::string_view eval_mode_name(EvalMode m) {
    return m == EvalMode::tap_only ? "tap_only" : "tap_and_eval";
}

EvalMode parse_eval_mode(std::string_view name) {
    if (name == "tap_only") return EvalMode::tap_only;
    if (name == "tap_and_eval") return EvalMode::tap_and_eval;
    throw InvalidArgument("unknown eval_mode '" + std::string(name) + "' (expected tap_only or tap_and_eval)");
}

SweepConfig sweep_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidArgument("sweep config must be a JSON object");
    static const std::set<std::string> known = {"method", "grid", "metric", "n_samples", "seed", "eval_mode",
                                                "max_candidates"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw InvalidArgument("unknown sweep config key '" + key + "'");
    SweepConfig c;
    try {
        c.method = parse_method(j.at("method").get<std::string>());
        const auto& grid = j.at("grid");
        if (!grid.is_object()) throw InvalidArgument("sweep grid must be an object");
        for (const auto& [key, values] : grid.items()) {
            if (!values.is_array() || values.empty())
                throw InvalidArgument("grid axis '" + key + "' must be a non-empty array");
            if (key == "lambda") {
                for (const auto& v : values) c.lambdas.push_back(v.get<double>());
            } else {
                // Checks the key applies to the method and every value parses.
                for (const auto& v : values) spec_from_json({{"method", j.at("method")}, {"mu", {{key, v}}}});
                c.mu_grid[key] = values.get<std::vector<nlohmann::json>>();
            }
        }
        if (c.lambdas.empty()) throw InvalidArgument("sweep grid needs a 'lambda' axis");
        if (j.contains("metric")) c.metric = parse_metric(j.at("metric").get<std::string>());
        if (j.contains("n_samples")) c.n_samples = j.at("n_samples").get<std::size_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("eval_mode")) c.eval_mode = parse_eval_mode(j.at("eval_mode").get<std::string>());
        if (j.contains("max_candidates")) c.max_candidates = j.at("max_candidates").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("malformed sweep config: ") + e.what());
    }
    if (c.n_samples == 0) throw InvalidArgument("n_samples must be positive");
    return c;
}

nlohmann::json sweep_config_to_json(const SweepConfig& c) {
    nlohmann::json grid = nlohmann::json::object();
    grid["lambda"] = c.lambdas;
    for (const auto& [key, values] : c.mu_grid) grid[key] = values;
    return {{"method", method_name(c.method)},
            {"grid", grid},
            {"metric", metric_name(c.metric)},
            {"n_samples", c.n_samples},
            {"seed", c.seed},
            {"eval_mode", eval_mode_name(c.eval_mode)},
            {"max_candidates", c.max_candidates}};
}

std::vector<MergeSpec> generate_grid(const SweepConfig& config) {
    if (config.lambdas.empty()) throw InvalidArgument("sweep grid needs at least one lambda");
    std::size_t total = config.lambdas.size();
    for (const auto& [key, values] : config.mu_grid) {
        if (values.empty()) throw InvalidArgument("grid axis '" + key + "' is empty");
        if (total > config.max_candidates / values.size() + 1) total = config.max_candidates + 1;
        else total *= values.size();
    }
    if (total > config.max_candidates)
        throw InvalidArgument("sweep grid has more than " + std::to_string(config.max_candidates) + " candidates");

    std::vector<std::pair<std::string, const std::vector<nlohmann::json>*>> axes;
    for (const auto& [key, values] : config.mu_grid) axes.emplace_back(key, &values);

    std::vector<MergeSpec> out;
    out.reserve(total);
    std::vector<std::size_t> pos(axes.size(), 0);
    for (double lambda : config.lambdas) {
        std::fill(pos.begin(), pos.end(), 0);
        while (true) {
            nlohmann::json mu = nlohmann::json::object();
            for (std::size_t a = 0; a < axes.size(); ++a) mu[axes[a].first] = (*axes[a].second)[pos[a]];
            out.push_back(spec_from_json({{"method", method_name(config.method)}, {"lambda", lambda}, {"mu", mu}}));
            // Odometer increment, last key fastest.
            bool carry = true;
            for (std::size_t a = axes.size(); carry && a > 0;) {
                --a;
                if (++pos[a] < axes[a].second->size()) carry = false;
                else pos[a] = 0;
            }
            if (carry) break;
        }
    }
    return out;
}

// --- toy provider ---------------------------------------------------------

ToyFeatureProvider::ToyFeatureProvider(const toy::Bench& bench, std::size_t n_samples, std::uint64_t seed) {
    if (bench.tasks.size() != bench.finetuned.size()) throw InvalidArgument("bench tasks and checkpoints differ in count");
    for (std::size_t t = 0; t < bench.tasks.size(); ++t) {
        const auto& task = bench.tasks[t];
        const auto idx = toy::tap_sample_indices(task, n_samples, seed);
        Entry e;
        e.x = toy::take_rows(task.x_train, idx);
        e.digest = sample_digest(task.task_id, idx);
        e.finetuned = &bench.finetuned[t];
        entries_.emplace(task.task_id, std::move(e));
    }
}

std::vector<std::string> ToyFeatureProvider::task_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : entries_) ids.push_back(id);
    return ids;
}

const ToyFeatureProvider::Entry& ToyFeatureProvider::entry(const std::string& task_id) const {
    const auto it = entries_.find(task_id);
    if (it == entries_.end()) throw SchemaMismatch("no samples for task '" + task_id + "'");
    return it->second;
}

FeatureSet ToyFeatureProvider::teacher(const std::string& task_id) {
    const auto it = entries_.find(task_id);
    if (it == entries_.end()) throw SchemaMismatch("no samples for task '" + task_id + "'");
    auto& e = it->second;
    if (!e.teacher) {
        e.teacher = toy::encoder_forward(*e.finetuned, e.x, task_id, e.digest);
        count(static_cast<std::size_t>(e.x.rows()));
    }
    return *e.teacher;
}

FeatureSet ToyFeatureProvider::merged(const WeightMap& weights, const std::string& task_id, std::size_t) {
    const auto& e = entry(task_id);
    auto f = toy::encoder_forward(weights, e.x, task_id, e.digest);
    count(static_cast<std::size_t>(e.x.rows()));
    return f;
}

// --- external provider ----------------------------------------------------

int run_process(const std::filesystem::path& exe, const std::vector<std::string>& args) {
    std::vector<std::string> storage;
    storage.push_back(exe.string());
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, storage[0].c_str(), nullptr, nullptr, argv.data(), environ);
    if (rc != 0) throw IoError("cannot start '" + exe.string() + "': " + std::strerror(rc));
    int status = 0;
    while (waitpid(pid, &status, 0) < 0)
        if (errno != EINTR) throw IoError("waitpid failed for '" + exe.string() + "'");
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
    return -1;
}

ExternalFeatureProvider::ExternalFeatureProvider(std::filesystem::path executable, std::filesystem::path work_dir,
                                                 std::map<std::string, TaskInputs> tasks, std::size_t n_samples)
    : exe_(std::move(executable)), work_(std::move(work_dir)), tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw InvalidArgument("external feature provider needs at least one task");
    std::filesystem::create_directories(work_);
    for (const auto& [id, in] : tasks_) {
        auto samples = load_features(in.samples, id);
        if (samples.rows < n_samples)
            throw InvalidArgument("sample file for '" + id + "' has " + std::to_string(samples.rows) + " rows, " +
                                  std::to_string(n_samples) + " requested");
        samples.data.resize(n_samples * samples.cols);
        samples.rows = n_samples;
        Fnv1a h;
        h.update_u64(samples.sample_digest);
        h.update_u64(n_samples);
        samples.sample_digest = h.digest();
        const auto path = work_ / (id + "_samples.fts");
        save_features(samples, path);
        samples_[id] = path;
        rows_[id] = n_samples;
    }
}

std::vector<std::string> ExternalFeatureProvider::task_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : tasks_) ids.push_back(id);
    return ids;
}

FeatureSet ExternalFeatureProvider::invoke(const std::filesystem::path& checkpoint, const std::string& task_id,
                                           const std::string& tag) {
    const auto out = work_ / (tag + "_" + task_id + ".fts");
    const int status = run_process(exe_, {checkpoint.string(), samples_.at(task_id).string(), out.string()});
    if (status != 0)
        throw IoError("feature provider exited with status " + std::to_string(status) + " for task '" + task_id + "'");
    auto f = load_features(out, task_id, FeatureSource::external_provider);
    std::filesystem::remove(out);
    if (f.rows != rows_.at(task_id))
        throw FormatError("feature provider returned " + std::to_string(f.rows) + " rows for task '" + task_id +
                          "', expected " + std::to_string(rows_.at(task_id)));
    count(f.rows);
    return f;
}

FeatureSet ExternalFeatureProvider::teacher(const std::string& task_id) {
    const auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw SchemaMismatch("no teacher checkpoint for task '" + task_id + "'");
    return invoke(it->second.teacher_checkpoint, task_id, "teacher");
}

FeatureSet ExternalFeatureProvider::merged(const WeightMap& weights, const std::string& task_id,
                                           std::size_t candidate) {
    if (!tasks_.count(task_id)) throw SchemaMismatch("no samples for task '" + task_id + "'");
    const std::string tag = "candidate" + std::to_string(candidate);
    const auto ckpt = work_ / (tag + "_" + task_id + ".mkt");
    save_checkpoint(weights, ckpt);
    auto f = invoke(ckpt, task_id, tag);
    std::filesystem::remove(ckpt);
    return f;
}

// --- sweep ----------------------------------------------------------------

namespace {

[[noreturn]] void rethrow_for_candidate(std::exception_ptr ep, std::size_t index) {
    const std::string prefix = "candidate " + std::to_string(index) + ": ";
    try {
        std::rethrow_exception(ep);
    } catch (const SchemaMismatch& e) {
        throw SchemaMismatch(prefix + e.what());
    } catch (const FormatError& e) {
        throw FormatError(prefix + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(prefix + e.what());
    } catch (const IoError& e) {
        throw IoError(prefix + e.what());
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(prefix + e.what());
    } catch (const std::exception& e) {
        throw Error(prefix + e.what());
    }
}

double normalized(const std::map<std::string, double>& merged, const std::map<std::string, double>& reference) {
    double s = 0.0;
    for (const auto& [task, v] : merged) s += v / reference.at(task);
    return s / static_cast<double>(merged.size());
}

}  // namespace

SweepReport run_sweep(const WeightMap& base, const std::vector<TaskVector>& tvs, const SweepConfig& config,
                      FeatureProvider& features, const toy::Bench* bench, const SweepOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    if (config.eval_mode == EvalMode::tap_and_eval && bench == nullptr)
        throw InvalidArgument("evaluation requested without a trainable benchmark");
    check_task_vectors(tvs);
    const auto specs = generate_grid(config);

    SweepReport report;
    report.config = config;
    for (const auto& tv : tvs) report.task_ids.push_back(tv.task_id);
    std::sort(report.task_ids.begin(), report.task_ids.end());
    const auto provided = features.task_ids();
    for (const auto& id : report.task_ids)
        if (std::find(provided.begin(), provided.end(), id) == provided.end())
            throw SchemaMismatch("feature source has no samples for task '" + id + "'");

    // Teacher features do not depend on the candidate: computed once.
    std::vector<FeatureSet> teachers;
    for (const auto& id : report.task_ids) teachers.push_back(features.teacher(id));

    std::map<std::string, const toy::ToyTask*> task_by_id;
    std::map<std::string, toy::Probe> frozen_probes;
    const bool eval = config.eval_mode == EvalMode::tap_and_eval;
    if (eval) {
        for (std::size_t t = 0; t < bench->tasks.size(); ++t) task_by_id[bench->tasks[t].task_id] = &bench->tasks[t];
        for (const auto& id : report.task_ids) {
            const auto it = task_by_id.find(id);
            if (it == task_by_id.end()) throw SchemaMismatch("benchmark has no task '" + id + "'");
            const auto t = static_cast<std::size_t>(it->second - bench->tasks.data());
            const auto& task = *it->second;
            auto probe = toy::train_probe(toy::features_of(bench->finetuned[t], task.x_train), task.y_train,
                                          bench->config.ridge_penalty);
            const double r2 = toy::r_squared(probe.predict(toy::features_of(bench->finetuned[t], task.x_test)),
                                             task.y_test);
            if (!(r2 > 0.0))
                throw NumericalError("fine-tuned model of task '" + id + "' has non-positive R^2; "
                                     "normalized performance is undefined");
            report.finetuned_eval[id] = r2;
            frozen_probes.emplace(id, std::move(probe));
            ++report.cost.decoder_trainings;
        }
    }

    report.rows.resize(specs.size());
    std::vector<std::exception_ptr> errors(specs.size());
    std::atomic<std::size_t> next{0};
    std::atomic<std::uint64_t> trainings{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < specs.size(); i = next++) {
            try {
                SweepRow row;
                row.candidate_index = i;
                const auto merged = merge(base, tvs, specs[i]);
                row.spec = merged.spec;
                std::vector<FeatureSet> student;
                for (const auto& id : report.task_ids) student.push_back(features.merged(merged.weights, id, i));
                row.tap = tap_report(student, teachers, config.metric);
                if (eval) {
                    for (const auto& id : report.task_ids) {
                        const auto& task = *task_by_id.at(id);
                        row.eval[id] = toy::evaluate(merged.weights, task, toy::ProbeMode::retrain, nullptr,
                                                     bench->config.ridge_penalty);
                        ++trainings;
                        row.frozen_eval[id] = toy::evaluate(merged.weights, task, toy::ProbeMode::frozen,
                                                            &frozen_probes.at(id), bench->config.ridge_penalty);
                    }
                    row.normalized_performance = normalized(row.eval, report.finetuned_eval);
                    row.frozen_normalized_performance = normalized(row.frozen_eval, report.finetuned_eval);
                }
                report.rows[i] = std::move(row);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned jobs = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(specs.size())));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (errors[i]) rethrow_for_candidate(errors[i], i);

    report.cost.decoder_trainings += trainings.load();
    report.cost.encoder_forward_passes = features.forward_passes();

    std::vector<double> taps;
    for (const auto& r : report.rows) taps.push_back(r.tap.average);
    report.selected_by_tap = select_index(taps);
    if (eval) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < report.rows.size(); ++i)
            if (*report.rows[i].normalized_performance > *report.rows[best].normalized_performance) best = i;
        report.selected_by_eval = best;
    }
    if (options.record_time)
        report.cost.wall_clock_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count());
    return report;
}

nlohmann::json sweep_report_to_json(const SweepReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json j = {{"candidate_index", row.candidate_index},
                            {"spec", spec_to_json(row.spec)},
                            {"tap_average", row.tap.average},
                            {"per_task_tap", row.tap.per_task}};
        if (row.normalized_performance) {
            j["eval"] = row.eval;
            j["frozen_eval"] = row.frozen_eval;
            j["normalized_performance"] = *row.normalized_performance;
            j["frozen_normalized_performance"] = *row.frozen_normalized_performance;
        }
        rows.push_back(std::move(j));
    }
    const auto pick = [&](std::size_t i) {
        return nlohmann::json{{"candidate_index", i}, {"spec", spec_to_json(r.rows.at(i).spec)}};
    };
    nlohmann::json cost = {{"encoder_forward_passes", r.cost.encoder_forward_passes},
                           {"decoder_trainings", r.cost.decoder_trainings}};
    if (r.cost.wall_clock_ms) cost["wall_clock_ms"] = *r.cost.wall_clock_ms;
    nlohmann::json j = {{"config", sweep_config_to_json(r.config)},
                        {"task_ids", r.task_ids},
                        {"rows", rows},
                        {"selected_by_tap", pick(r.selected_by_tap)},
                        {"cost", cost}};
    if (r.selected_by_eval) {
        j["selected_by_eval"] = pick(*r.selected_by_eval);
        j["finetuned_eval"] = r.finetuned_eval;
    }
    return j;
}

std::string sweep_report_csv(const SweepReport& r) {
    std::string out = "candidate_index,lambda";
    for (const auto& [key, _] : r.config.mu_grid) out += "," + key;
    out += ",tap_average";
    const bool eval = r.config.eval_mode == EvalMode::tap_and_eval;
    if (eval) {
        for (const auto& id : r.task_ids) out += ",eval_" + id;
        out += ",normalized_performance";
    }
    out += "\n";
    for (const auto& row : r.rows) {
        const auto spec = spec_to_json(row.spec);
        out += std::to_string(row.candidate_index) + "," + format_double(std::get<double>(row.spec.lambda));
        for (const auto& [key, _] : r.config.mu_grid) {
            const auto& v = spec.at("mu").at(key);
            out += "," + (v.is_number() ? format_double(v.get<double>()) : v.get<std::string>());
        }
        out += "," + format_double(row.tap.average);
        if (eval) {
            for (const auto& id : r.task_ids) out += "," + format_double(row.eval.at(id));
            out += "," + format_double(*row.normalized_performance);
        }
        out += "\n";
    }
    return out;
}

}  // namespace tapmerge
