#include "tapmerge/ada_tap.hpp"

#include <cmath>
#include <map>

#include "tapmerge/error.hpp"
#include "tapmerge/util.hpp"

namespace tapmerge::ada {

std::string_view structure_name(LambdaStructure s) {
    return s == LambdaStructure::per_task ? "per_task" : "per_task_per_layer";
}

LambdaStructure parse_structure(std::string_view name) {
    if (name == "per_task") return LambdaStructure::per_task;
    if (name == "per_task_per_layer") return LambdaStructure::per_task_per_layer;
    throw InvalidArgument("unknown lambda structure '" + std::string(name) +
                          "' (expected per_task or per_task_per_layer)");
}

void AdaConfig::validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (iterations == 0) throw InvalidArgument("iterations must be at least 1");
    if (batch_size == 0) throw InvalidArgument("batch size must be at least 1");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw InvalidArgument("ema_decay must lie in (0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw InvalidArgument("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0) || !(norm_eps > 0.0)) throw InvalidArgument("epsilons must be positive");
    if (snapshot_every == 0) throw InvalidArgument("snapshot interval must be at least 1");
}

std::size_t Problem::num_coefficients() const {
    return structure == LambdaStructure::per_task ? num_tasks() : num_tasks() * num_layers();
}

std::size_t Problem::index(std::size_t t, std::size_t l) const {
    return structure == LambdaStructure::per_task ? t : t * num_layers() + l;
}

Problem make_problem(const WeightMap& base, const std::vector<TaskVector>& tvs, LambdaStructure structure) {
    if (tvs.empty()) throw InvalidArgument("no task vectors");
    check_task_vectors(tvs);
    std::vector<const WeightMap*> maps = {&base};
    for (const auto& tv : tvs) maps.push_back(&tv.delta);
    validate_compat(maps);
    Problem p;
    p.base = toy::to_encoder(base);
    for (const auto& tv : tvs) {
        p.deltas.push_back(toy::to_encoder(tv.delta));
        p.task_ids.push_back(tv.task_id);
    }
    p.structure = structure;
    return p;
}

toy::Encoder merged_encoder(const Problem& p, const Eigen::VectorXd& lambda) {
    if (static_cast<std::size_t>(lambda.size()) != p.num_coefficients())
        throw InvalidArgument("lambda has " + std::to_string(lambda.size()) + " entries, expected " +
                              std::to_string(p.num_coefficients()));
    toy::Encoder enc = p.base;
    for (std::size_t t = 0; t < p.num_tasks(); ++t)
        for (std::size_t l = 0; l < p.num_layers(); ++l) {
            const double c = lambda(static_cast<Eigen::Index>(p.index(t, l)));
            enc[l].weight += c * p.deltas[t][l].weight;
            enc[l].bias += c * p.deltas[t][l].bias;
        }
    return enc;
}

Lambda to_merge_lambda(const Problem& p, const Eigen::VectorXd& lambda) {
    if (p.structure == LambdaStructure::per_task) {
        PerTaskLambda out;
        for (std::size_t t = 0; t < p.num_tasks(); ++t) out[p.task_ids[t]] = lambda(static_cast<Eigen::Index>(t));
        return out;
    }
    PerLayerLambda out;
    for (std::size_t t = 0; t < p.num_tasks(); ++t)
        for (std::size_t l = 0; l < p.num_layers(); ++l)
            out[p.task_ids[t]]["layer" + std::to_string(l)] = lambda(static_cast<Eigen::Index>(p.index(t, l)));
    return out;
}

double RunningStats::update(const Eigen::MatrixXd& features, double decay) {
    const Eigen::RowVectorXd m = features.colwise().mean();
    const Eigen::RowVectorXd v = (features.rowwise() - m).array().square().colwise().mean().matrix();
    if (!initialized) {
        mean = m;
        var = v;
        initialized = true;
        return std::max(m.cwiseAbs().maxCoeff(), v.cwiseAbs().maxCoeff());
    }
    const Eigen::RowVectorXd new_mean = decay * mean + (1.0 - decay) * m;
    const Eigen::RowVectorXd new_var = decay * var + (1.0 - decay) * v;
    const double delta = std::max((new_mean - mean).cwiseAbs().maxCoeff(), (new_var - var).cwiseAbs().maxCoeff());
    mean = new_mean;
    var = new_var;
    return delta;
}

Eigen::MatrixXd RunningStats::normalize(const Eigen::MatrixXd& features, double eps) const {
    if (!initialized) throw InvalidArgument("running statistics used before the first update");
    const Eigen::RowVectorXd inv = (var.array() + eps).rsqrt().matrix();
    return ((features.rowwise() - mean).array().rowwise() * inv.array()).matrix();
}

double EmaState::update(const std::vector<Eigen::MatrixXd>& student_features,
                       const std::vector<Eigen::MatrixXd>& teacher_features, double decay) {
    if (student_features.empty() || student_features.size() != teacher.size() ||
        teacher_features.size() != teacher.size())
        throw InvalidArgument("statistics update needs features for every task");
    Eigen::Index rows = 0;
    for (const auto& f : student_features) rows += f.rows();
    Eigen::MatrixXd stacked(rows, student_features.front().cols());
    rows = 0;
    for (const auto& f : student_features) {
        stacked.middleRows(rows, f.rows()) = f;
        rows += f.rows();
    }
    double delta = student.update(stacked, decay);
    for (std::size_t t = 0; t < teacher.size(); ++t)
        delta = std::max(delta, teacher[t].update(teacher_features[t], decay));
    return delta;
}

namespace {

void check_inputs(const Problem& p, const Batch& batch, const EmaState& ema) {
    const std::size_t T = p.num_tasks();
    if (batch.inputs.size() != T || batch.teacher_features.size() != T || ema.teacher.size() != T)
        throw InvalidArgument("batch and statistics must cover every task");
    for (std::size_t t = 0; t < T; ++t)
        if (batch.inputs[t].rows() == 0) throw InvalidArgument("empty batch for task '" + p.task_ids[t] + "'");
}

// Mean over rows of 1 - cos(z_i, y_i); optionally dLoss/dz.
double cosine_loss(const Eigen::MatrixXd& z, const Eigen::MatrixXd& y, Eigen::MatrixXd* dz, const std::string& task) {
    const auto n = z.rows();
    double total = 0.0;
    if (dz) dz->resize(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double nz = z.row(i).norm();
        const double ny = y.row(i).norm();
        if (nz == 0.0 || ny == 0.0)
            throw NumericalError("zero-norm normalised feature row " + std::to_string(i) + " for task '" + task + "'");
        const double c = z.row(i).dot(y.row(i)) / (nz * ny);
        total += 1.0 - c;
        if (dz) dz->row(i) = -(y.row(i) / (nz * ny) - c * z.row(i) / (nz * nz)) / static_cast<double>(n);
    }
    return total / static_cast<double>(n);
}

LossResult evaluate_loss(const Problem& p, const Eigen::VectorXd& lambda, const Batch& batch, const EmaState& ema,
                         double eps, bool with_grad) {
    check_inputs(p, batch, ema);
    const std::size_t T = p.num_tasks();
    const toy::Encoder enc = merged_encoder(p, lambda);
    LossResult r;
    r.per_task.resize(T);
    if (with_grad) r.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.num_coefficients()));
    for (std::size_t t = 0; t < T; ++t) {
        const auto cache = toy::forward(enc, batch.inputs[t]);
        const Eigen::MatrixXd z = ema.student.normalize(cache.features(), eps);
        const Eigen::MatrixXd y = ema.teacher[t].normalize(batch.teacher_features[t], eps);
        Eigen::MatrixXd dz;
        r.per_task[t] = cosine_loss(z, y, with_grad ? &dz : nullptr, p.task_ids[t]);
        r.loss += r.per_task[t];
        if (!with_grad) continue;
        // d z / d features is a per-dimension scale (statistics are constants).
        const Eigen::RowVectorXd inv = (ema.student.var.array() + eps).rsqrt().matrix();
        const Eigen::MatrixXd df = (dz.array().rowwise() * inv.array()).matrix() / static_cast<double>(T);
        const toy::Encoder g = toy::backward(enc, cache, df);
        // theta is linear in lambda: dL/dlambda = <dL/dtheta, tau>.
        for (std::size_t s = 0; s < T; ++s)
            for (std::size_t l = 0; l < p.num_layers(); ++l)
                r.gradient(static_cast<Eigen::Index>(p.index(s, l))) +=
                    g[l].weight.cwiseProduct(p.deltas[s][l].weight).sum() + g[l].bias.dot(p.deltas[s][l].bias);
    }
    r.loss /= static_cast<double>(T);
    return r;
}

}  // namespace

LossResult tap_loss(const Problem& p, const Eigen::VectorXd& lambda, const Batch& batch, const EmaState& ema,
                    double norm_eps) {
    return evaluate_loss(p, lambda, batch, ema, norm_eps, false);
}

LossResult tap_loss_grad(const Problem& p, const Eigen::VectorXd& lambda, const Batch& batch, const EmaState& ema,
                         double norm_eps) {
    return evaluate_loss(p, lambda, batch, ema, norm_eps, true);
}

std::string trace_csv(const AdaTrace& trace) {
    std::string out = "iteration,total_loss";
    for (const auto& id : trace.task_ids) out += ",loss_" + id;
    for (const auto& name : trace.coefficient_names) out += ",lambda_" + name;
    out += "\n";
    for (const auto& row : trace.rows) {
        out += std::to_string(row.iteration) + "," + format_double(row.total_loss);
        for (double v : row.per_task) out += "," + format_double(v);
        for (std::size_t k = 0; k < trace.coefficient_names.size(); ++k) {
            out += ",";
            if (row.lambda) out += format_double((*row.lambda)(static_cast<Eigen::Index>(k)));
        }
        out += "\n";
    }
    return out;
}

Batch draw_batch(const std::vector<toy::ToyTask>& tasks, const std::vector<toy::Encoder>& teachers,
                 std::size_t batch_size, std::uint64_t seed, std::size_t iteration) {
    Batch b;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& task = tasks[t];
        const auto n = static_cast<std::size_t>(task.x_train.rows());
        if (batch_size > n)
            throw InvalidArgument("batch size " + std::to_string(batch_size) + " exceeds the " + std::to_string(n) +
                                  " training inputs of '" + task.task_id + "'");
        CounterRng rng(seed, "ada-batch/" + task.task_id + "/" + std::to_string(iteration));
        auto idx = permutation(n, rng);
        idx.resize(batch_size);
        b.inputs.push_back(toy::take_rows(task.x_train, idx));
        b.teacher_features.push_back(toy::forward(teachers[t], b.inputs.back()).features());
    }
    return b;
}

AdaResult optimize(const Problem& p, const std::vector<toy::ToyTask>& tasks, const std::vector<WeightMap>& teachers,
                   const AdaConfig& config) {
    config.validate();
    const std::size_t T = p.num_tasks();
    if (tasks.size() != teachers.size()) throw InvalidArgument("tasks and teachers differ in count");
    // Align tasks and teachers with the problem's task order.
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < tasks.size(); ++i) pos[tasks[i].task_id] = i;
    std::vector<toy::ToyTask> ordered;
    std::vector<toy::Encoder> teacher_enc;
    for (const auto& id : p.task_ids) {
        const auto it = pos.find(id);
        if (it == pos.end()) throw SchemaMismatch("no task data for '" + id + "'");
        ordered.push_back(tasks[it->second]);
        teacher_enc.push_back(toy::to_encoder(teachers[it->second]));
    }

    AdaResult result;
    auto& trace = result.trace;
    trace.task_ids = p.task_ids;
    for (std::size_t t = 0; t < T; ++t) {
        if (p.structure == LambdaStructure::per_task) trace.coefficient_names.push_back(p.task_ids[t]);
        else
            for (std::size_t l = 0; l < p.num_layers(); ++l)
                trace.coefficient_names.push_back(p.task_ids[t] + "_layer" + std::to_string(l));
    }

    const auto k = static_cast<Eigen::Index>(p.num_coefficients());
    Eigen::VectorXd lambda = Eigen::VectorXd::Constant(k, config.initial_lambda.value_or(1.0 / static_cast<double>(T)));
    Eigen::VectorXd m = Eigen::VectorXd::Zero(k), v = Eigen::VectorXd::Zero(k);
    EmaState ema{RunningStats{}, std::vector<RunningStats>(T)};

    for (std::size_t it = 0; it < config.iterations; ++it) {
        const Batch batch = draw_batch(ordered, teacher_enc, config.batch_size, config.seed, config.resample ? it : 0);
        const toy::Encoder enc = merged_encoder(p, lambda);
        std::vector<Eigen::MatrixXd> student;
        for (std::size_t t = 0; t < T; ++t) student.push_back(toy::forward(enc, batch.inputs[t]).features());
        const double delta = ema.update(student, batch.teacher_features, config.ema_decay);
        const auto r = tap_loss_grad(p, lambda, batch, ema, config.norm_eps);
        TraceRow row;
        row.iteration = it;
        row.total_loss = r.loss;
        row.per_task = r.per_task;
        row.ema_delta = delta;
        if (!std::isfinite(r.loss) || !r.gradient.allFinite()) {
            trace.rows.push_back(std::move(row));
            throw Diverged("AdaMerging loss became non-finite at iteration " + std::to_string(it), trace);
        }
        if (it % config.snapshot_every == 0) row.lambda = lambda;
        trace.rows.push_back(std::move(row));

        const double step = static_cast<double>(it + 1);
        m = config.beta1 * m + (1.0 - config.beta1) * r.gradient;
        v = config.beta2 * v + (1.0 - config.beta2) * r.gradient.cwiseAbs2();
        const Eigen::VectorXd m_hat = m / (1.0 - std::pow(config.beta1, step));
        const Eigen::VectorXd v_hat = v / (1.0 - std::pow(config.beta2, step));
        lambda.array() -= config.lr * m_hat.array() / (v_hat.array().sqrt() + config.adam_eps);
    }
    trace.rows.back().lambda = lambda;
    result.lambda = lambda;
    return result;
}

}  // namespace tapmerge::ada
