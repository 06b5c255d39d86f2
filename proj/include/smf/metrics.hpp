#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace smf {

/// Squared 1D 2-Wasserstein distance between empirical distributions,
/// integrating the squared quantile difference exactly (sizes may differ).
inline double wasserstein2_sq_1d(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return s / static_cast<double>(a.size());
    }
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double u = 0.0, s = 0.0;
    while (i < a.size() && j < b.size()) {
        const double next = std::min((i + 1) / na, (j + 1) / nb);
        s += (next - u) * (a[i] - b[j]) * (a[i] - b[j]);
        u = next;
        if ((i + 1) / na <= next) ++i;
        if ((j + 1) / nb <= next) ++j;
    }
    return s;
}

/// Random unit directions in R^dim, shared by both arguments of a comparison.
inline std::vector<std::vector<double>> random_directions(std::size_t dim, int count, Rng& rng) {
    std::vector<std::vector<double>> dirs(static_cast<std::size_t>(count), std::vector<double>(dim));
    for (auto& d : dirs) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& x : d) {
                x = rng.normal();
                norm += x * x;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (auto& x : d) x /= norm;
    }
    return dirs;
}

template <class T>
std::vector<double> project(const Tensor<T>& points, std::span<const double> dir) {
    const std::size_t n = points.rows(), d = points.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) out[i] += static_cast<double>(points.values()[i * d + k]) * dir[k];
    return out;
}

/// Mean over projections of the 1D 2-Wasserstein distance.
template <class T>
double sliced_wasserstein(const Tensor<T>& a, const Tensor<T>& b, const std::vector<std::vector<double>>& dirs) {
    if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("sliced_wasserstein: empty point set");
    if (a.cols() != b.cols())
        throw dimension_error("sliced_wasserstein: dimension " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
    double total = 0.0;
    for (const auto& d : dirs) total += std::sqrt(wasserstein2_sq_1d(project(a, d), project(b, d)));
    return total / static_cast<double>(dirs.size());
}

inline constexpr int kDefaultProjections = 256;
inline constexpr std::uint64_t kProjectionSeed = 0x5EED5;

template <class T>
double sliced_wasserstein(const Tensor<T>& a, const Tensor<T>& b, int n_projections, Rng& rng) {
    if (a.cols() != b.cols())
        throw dimension_error("sliced_wasserstein: dimension " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
    return sliced_wasserstein(a, b, random_directions(a.cols(), n_projections, rng));
}

/// Default estimator: 256 projections from the fixed projection seed.
template <class T>
double sliced_wasserstein(const Tensor<T>& a, const Tensor<T>& b) {
    Rng rng(kProjectionSeed);
    return sliced_wasserstein(a, b, kDefaultProjections, rng);
}

/// 10 log10(peak^2 / MSE); +infinity when the inputs are identical.
template <class T>
double psnr(std::span<const T> a, std::span<const T> b, double peak = 1.0) {
    if (a.size() != b.size()) throw dimension_error("psnr: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    const double mse = s / static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

/// Mean PSNR over the rows of two equally shaped batches.
template <class T>
double mean_psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
    if (a.shape() != b.shape()) throw dimension_error("mean_psnr: shape mismatch");
    const std::size_t d = a.cols();
    double s = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) s += psnr<T>(a.values().subspan(r * d, d), b.values().subspan(r * d, d), peak);
    return s / static_cast<double>(a.rows());
}

// ---------------------------------------------------------------- texture statistics

inline constexpr int kGradientBins = 8;
inline constexpr double kGradientRange = 0.4;

/// Normalized histogram of forward-difference gradient magnitudes of a square
/// patch over [0, kGradientRange); the last bin also takes larger values.
template <class T>
std::vector<double> gradient_histogram(std::span<const T> patch) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patch.size()))));
    if (side * side != patch.size() || side < 2) throw dimension_error("gradient_histogram: patch is not square");
    std::vector<double> h(kGradientBins, 0.0);
    for (std::size_t y = 0; y + 1 < side; ++y) {
        for (std::size_t x = 0; x + 1 < side; ++x) {
            const double c = patch[y * side + x];
            const double dx = patch[y * side + x + 1] - c, dy = patch[(y + 1) * side + x] - c;
            const double mag = std::sqrt(dx * dx + dy * dy);
            const int bin = std::min(kGradientBins - 1, static_cast<int>(mag / kGradientRange * kGradientBins));
            h[static_cast<std::size_t>(bin)] += 1.0;
        }
    }
    const double total = static_cast<double>((side - 1) * (side - 1));
    for (auto& v : h) v /= total;
    return h;
}

/// Row-wise gradient histograms of a batch of patches: [n, side^2] -> [n, bins].
template <class T>
Tensor<double> gradient_histograms(const Tensor<T>& patches) {
    std::vector<double> out;
    const std::size_t d = patches.cols();
    for (std::size_t r = 0; r < patches.rows(); ++r) {
        auto h = gradient_histogram<T>(patches.values().subspan(r * d, d));
        out.insert(out.end(), h.begin(), h.end());
    }
    return Tensor<double>(Shape{patches.rows(), static_cast<std::size_t>(kGradientBins)}, std::move(out));
}

// ---------------------------------------------------------------- seed protocols

struct DiversityResult {
    double mean_to_reference = 0.0;  // mean distance of seeds 2..n to seed 1
    std::vector<std::vector<double>> pairwise;
};

/// `generate(seed)` produces one batch of outputs under a fixed condition;
/// `distance(a, b)` compares two batches. The first seed is the reference.
template <class Generate, class Distance>
DiversityResult seed_diversity(Generate&& generate, std::span<const std::uint64_t> seeds, Distance&& distance) {
    if (seeds.size() < 2) throw std::invalid_argument("seed_diversity: need at least 2 seeds");
    std::vector<decltype(generate(seeds[0]))> outputs;
    for (auto s : seeds) outputs.push_back(generate(s));
    const std::size_t n = seeds.size();
    DiversityResult res;
    res.pairwise.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) res.pairwise[i][j] = res.pairwise[j][i] = distance(outputs[i], outputs[j]);
    double s = 0.0;
    for (std::size_t j = 1; j < n; ++j) s += res.pairwise[0][j];
    res.mean_to_reference = s / static_cast<double>(n - 1);
    return res;
}

/// Mean over rows of the Euclidean distance between corresponding rows.
template <class T>
double mean_row_distance(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw dimension_error("mean_row_distance: shape mismatch");
    const std::size_t d = a.cols();
    double total = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double x = static_cast<double>(a.values()[r * d + k]) - static_cast<double>(b.values()[r * d + k]);
            s += x * x;
        }
        total += std::sqrt(s);
    }
    return total / static_cast<double>(a.rows());
}

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation over seeds
    std::vector<std::pair<std::uint64_t, double>> per_seed;
};

struct MetricReport {
    std::map<std::string, MetricSummary> metrics;
    std::size_t seeds = 0;
    std::size_t samples_per_seed = 0;
    std::uint64_t config_fingerprint = 0;
};

/// Mean and sample std of values, summed in sorted order so the result does
/// not depend on the order in which seeds were evaluated.
inline std::pair<double, double> mean_std(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    return {m, v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Runs `evaluate(seed) -> std::map<std::string, double>` for every seed and
/// summarizes each metric.
template <class Evaluate>
MetricReport metric_stability(Evaluate&& evaluate, std::span<const std::uint64_t> seeds) {
    if (seeds.size() < 2) throw std::invalid_argument("metric_stability: need at least 2 seeds");
    MetricReport rep;
    rep.seeds = seeds.size();
    for (auto seed : seeds) {
        const std::map<std::string, double> values = evaluate(seed);
        for (const auto& [name, v] : values) rep.metrics[name].per_seed.emplace_back(seed, v);
    }
    for (auto& [name, m] : rep.metrics) {
        std::vector<double> v;
        for (const auto& p : m.per_seed) v.push_back(p.second);
        std::tie(m.mean, m.std) = mean_std(std::move(v));
    }
    return rep;
}

/// Seeds 1..n.
inline std::vector<std::uint64_t> seed_range(std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i + 1;
    return s;
}

}  // namespace smf
