#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "tapmerge/tensor_store.hpp"
#include "tapmerge/util.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tapmerge_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline tapmerge::Tensor random_tensor(std::vector<std::int64_t> shape, tapmerge::CounterRng& rng, double scale = 1.0) {
    auto t = tapmerge::Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(scale * rng.normal());
    return t;
}

// Two-layer map with matrices and biases, the shape used by most merging tests.
inline tapmerge::WeightMap random_map(std::uint64_t seed, double scale = 1.0, std::int64_t in = 5, std::int64_t hid = 4,
                                      std::int64_t out = 3) {
    tapmerge::CounterRng rng(seed, "map");
    tapmerge::WeightMap m;
    m.emplace("layer0.weight", random_tensor({hid, in}, rng, scale));
    m.emplace("layer0.bias", random_tensor({hid}, rng, scale));
    m.emplace("layer1.weight", random_tensor({out, hid}, rng, scale));
    m.emplace("layer1.bias", random_tensor({out}, rng, scale));
    return m;
}

// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
        i = j + 1;
    }
    return r;
}

// Spearman rank correlation: Pearson correlation of the average ranks.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto x = ranks(a), y = ranks(b);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

inline std::size_t argmin(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace testing
