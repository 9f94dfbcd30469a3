#include "tapmerge/task_vector.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "tapmerge/error.hpp"
#include "tapmerge/util.hpp"

namespace tapmerge {

LayerGrouping LayerGrouping::strip_suffix(int components) {
    if (components < 0) throw InvalidArgument("strip_suffix: negative component count");
    LayerGrouping g;
    g.strip_ = components;
    return g;
}

LayerGrouping LayerGrouping::prefixes(std::vector<std::string> prefixes) {
    if (prefixes.empty()) throw InvalidArgument("prefix grouping needs at least one prefix");
    LayerGrouping g;
    g.strip_ = -1;
    g.prefixes_ = std::move(prefixes);
    return g;
}

std::string LayerGrouping::group_of(const std::string& name) const {
    if (strip_ >= 0) {
        std::size_t cut = name.size();
        for (int k = 0; k < strip_; ++k) {
            const auto dot = name.rfind('.', cut == 0 ? 0 : cut - 1);
            if (dot == std::string::npos || dot == 0) return name;
            cut = dot;
        }
        return name.substr(0, cut);
    }
    const std::string* best = nullptr;
    for (const auto& p : prefixes_) {
        const bool match = name == p || (name.size() > p.size() && name.compare(0, p.size(), p) == 0 &&
                                         name[p.size()] == '.');
        if (match && (!best || p.size() > best->size())) best = &p;
    }
    return best ? *best : name;
}

std::vector<std::string> LayerGrouping::ordered_groups(const WeightMap& map) const {
    std::set<std::string> seen;
    for (const auto& [name, t] : map) seen.insert(group_of(name));
    if (seen.empty()) throw InvalidArgument("layer grouping matches no parameters");
    for (const auto& p : prefixes_)
        if (!seen.contains(p)) throw InvalidArgument("layer grouping prefix '" + p + "' matches no parameter");
    std::vector<std::string> groups(seen.begin(), seen.end());
    std::stable_sort(groups.begin(), groups.end(), natural_less);
    return groups;
}

bool natural_less(const std::string& a, const std::string& b) {
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const bool da = std::isdigit(static_cast<unsigned char>(a[i]));
        const bool db = std::isdigit(static_cast<unsigned char>(b[j]));
        if (da && db) {
            std::size_t ie = i, je = j;
            while (ie < a.size() && std::isdigit(static_cast<unsigned char>(a[ie]))) ++ie;
            while (je < b.size() && std::isdigit(static_cast<unsigned char>(b[je]))) ++je;
            // Compare digit runs by value: strip leading zeros, then length, then text.
            std::size_t is = i, js = j;
            while (is + 1 < ie && a[is] == '0') ++is;
            while (js + 1 < je && b[js] == '0') ++js;
            if (ie - is != je - js) return ie - is < je - js;
            const int c = a.compare(is, ie - is, b, js, je - js);
            if (c != 0) return c < 0;
            i = ie;
            j = je;
        } else {
            if (a[i] != b[j]) return a[i] < b[j];
            ++i;
            ++j;
        }
    }
    if ((a.size() - i) != (b.size() - j)) return a.size() - i < b.size() - j;
    return a < b;
}

TaskVector compute_task_vector(const WeightMap& base, const WeightMap& finetuned, std::string task_id) {
    if (task_id.empty()) throw InvalidArgument("task id must be non-empty");
    TaskVector tv{std::move(task_id), subtract(finetuned, base)};
    tv.residual = zeros_like(tv.delta);
    for (auto& [name, r] : tv.residual) {
        const auto& f = finetuned.at(name).data;
        const auto& b = base.at(name).data;
        const auto& d = tv.delta.at(name).data;
        for (std::size_t i = 0; i < r.numel(); ++i)
            r.data[i] = static_cast<float>((double(f[i]) - double(b[i])) - double(d[i]));
    }
    return tv;
}

void check_task_vectors(const std::vector<TaskVector>& tvs) {
    std::set<std::string> ids;
    for (const auto& tv : tvs) {
        if (tv.task_id.empty()) throw InvalidArgument("task id must be non-empty");
        if (!ids.insert(tv.task_id).second) throw InvalidArgument("duplicate task id '" + tv.task_id + "'");
    }
    if (tvs.size() > 1) {
        std::vector<const WeightMap*> maps;
        for (const auto& tv : tvs) maps.push_back(&tv.delta);
        validate_compat(maps);
    }
    for (const auto& tv : tvs)
        if (!tv.residual.empty()) validate_compat({&tv.delta, &tv.residual});
}

std::map<std::string, double> layer_norms(const WeightMap& delta, const LayerGrouping& grouping) {
    std::map<std::string, double> sq;
    for (const auto& g : grouping.ordered_groups(delta)) sq[g] = 0.0;
    for (const auto& [name, t] : delta) {
        double& acc = sq[grouping.group_of(name)];
        for (float v : t.data) acc += double(v) * double(v);
    }
    for (auto& [g, v] : sq) v = std::sqrt(v);
    return sq;
}

NormReport norms(const std::vector<TaskVector>& tvs, NormScope scope, const LayerGrouping& grouping) {
    if (tvs.empty()) throw InvalidArgument("norms: empty task vector list");
    check_task_vectors(tvs);
    NormReport report;
    report.scope = scope;
    for (const auto& tv : tvs) {
        if (scope == NormScope::global) {
            report.rows.push_back({tv.task_id, "ALL", std::sqrt(squared_norm(tv.delta))});
            continue;
        }
        const auto per_layer = layer_norms(tv.delta, grouping);
        for (const auto& g : grouping.ordered_groups(tv.delta))
            report.rows.push_back({tv.task_id, g, per_layer.at(g)});
    }
    return report;
}

namespace {

double dot(const WeightMap& a, const WeightMap& b) {
    double s = 0.0;
    for (const auto& [name, ta] : a) {
        const Tensor& tb = b.at(name);
        for (std::size_t i = 0; i < ta.numel(); ++i) s += double(ta.data[i]) * double(tb.data[i]);
    }
    return s;
}

double clamp_cos(double c) { return std::clamp(c, -1.0, 1.0); }

}  // namespace

CosineReport cosine_analysis(const std::vector<TaskVector>& tvs) {
    if (tvs.size() < 2) throw InvalidArgument("cosine_analysis needs at least two task vectors");
    check_task_vectors(tvs);
    const std::size_t T = tvs.size();

    std::vector<double> norm(T);
    for (std::size_t t = 0; t < T; ++t) {
        norm[t] = std::sqrt(squared_norm(tvs[t].delta));
        if (norm[t] == 0.0)
            throw NumericalError("task vector '" + tvs[t].task_id + "' is zero; cosine is undefined");
    }

    CosineReport r;
    r.pairwise.assign(T, std::vector<double>(T, 0.0));
    for (std::size_t a = 0; a < T; ++a) {
        r.task_ids.push_back(tvs[a].task_id);
        r.pairwise[a][a] = 1.0;
        for (std::size_t b = a + 1; b < T; ++b) {
            const double c = clamp_cos(dot(tvs[a].delta, tvs[b].delta) / (norm[a] * norm[b]));
            r.pairwise[a][b] = c;
            r.pairwise[b][a] = c;
        }
    }

    // Mean task vector kept in double to avoid rounding the comparison target.
    std::map<std::string, std::vector<double>> mean;
    for (const auto& [name, t] : tvs.front().delta) mean[name].assign(t.numel(), 0.0);
    for (const auto& tv : tvs)
        for (const auto& [name, t] : tv.delta) {
            auto& m = mean[name];
            for (std::size_t i = 0; i < t.numel(); ++i) m[i] += double(t.data[i]) / double(T);
        }
    double mean_sq = 0.0;
    for (const auto& [name, m] : mean)
        for (double v : m) mean_sq += v * v;
    const double mean_norm = std::sqrt(mean_sq);
    for (std::size_t t = 0; t < T; ++t) {
        if (mean_norm == 0.0) {
            r.to_average.push_back(0.0);
            continue;
        }
        double d = 0.0;
        for (const auto& [name, ten] : tvs[t].delta) {
            const auto& m = mean.at(name);
            for (std::size_t i = 0; i < ten.numel(); ++i) d += double(ten.data[i]) * m[i];
        }
        r.to_average.push_back(clamp_cos(d / (norm[t] * mean_norm)));
    }
    return r;
}

std::string norms_csv(const NormReport& report) {
    std::ostringstream os;
    os << "task_id,layer,l2_norm\n";
    for (const auto& row : report.rows) os << row.task_id << ',' << row.layer << ',' << format_double(row.l2_norm) << '\n';
    return os.str();
}

std::string cosine_csv(const CosineReport& report) {
    std::ostringstream os;
    os << "task_a,task_b,cosine\n";
    const std::size_t T = report.task_ids.size();
    for (std::size_t a = 0; a < T; ++a)
        for (std::size_t b = 0; b < T; ++b)
            os << report.task_ids[a] << ',' << report.task_ids[b] << ',' << format_double(report.pairwise[a][b]) << '\n';
    for (std::size_t a = 0; a < T; ++a)
        os << report.task_ids[a] << ",AVERAGE," << format_double(report.to_average[a]) << '\n';
    return os.str();
}

}  // namespace tapmerge
