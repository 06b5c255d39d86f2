#pragma once

// Toy conditional tasks: a clean sample x_h paired with a degraded
// observation x_l that plays the role of the low-resolution input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace smf {

struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kTwoMoons = "two-moons-conditional";
inline constexpr const char* kGaussianMixture = "gaussian-mixture-conditional";
inline constexpr const char* kTinyPatches = "tiny-patches";

inline constexpr std::size_t kPatchSide = 16;

struct DegradationParams {
    std::size_t downsample_factor = 2;
    double noise_std = 0.02;
    std::optional<int> quantize_levels;
};

struct ToyDataset {
    std::string name;
    std::uint64_t seed = 0;
    Shape hr_shape;  // per-sample shape of x_h
    Shape lr_shape;  // per-sample shape of x_l
    std::vector<float> hr;
    std::vector<float> lr;
    std::vector<int> labels;  // mixture component / texture family of each sample

    std::size_t hr_dim() const { return shape_size(hr_shape); }
    std::size_t lr_dim() const { return shape_size(lr_shape); }
    std::size_t size() const { return hr_dim() ? hr.size() / hr_dim() : 0; }

    std::span<const float> hr_row(std::size_t i) const { return {hr.data() + i * hr_dim(), hr_dim()}; }
    std::span<const float> lr_row(std::size_t i) const { return {lr.data() + i * lr_dim(), lr_dim()}; }

    Tensor<float> hr_batch(std::span<const std::size_t> idx) const { return gather(hr, hr_dim(), idx); }
    Tensor<float> lr_batch(std::span<const std::size_t> idx) const { return gather(lr, lr_dim(), idx); }

    /// Rows [begin, end) as a new dataset.
    ToyDataset slice(std::size_t begin, std::size_t end) const {
        ToyDataset out{name, seed, hr_shape, lr_shape, {}, {}, {}};
        out.hr.assign(hr.begin() + begin * hr_dim(), hr.begin() + end * hr_dim());
        out.lr.assign(lr.begin() + begin * lr_dim(), lr.begin() + end * lr_dim());
        out.labels.assign(labels.begin() + begin, labels.begin() + end);
        return out;
    }

    bool operator==(const ToyDataset&) const = default;

private:
    static Tensor<float> gather(const std::vector<float>& src, std::size_t dim, std::span<const std::size_t> idx) {
        std::vector<float> v(idx.size() * dim);
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy_n(src.data() + idx[r] * dim, dim, v.data() + r * dim);
        return Tensor<float>(Shape{idx.size(), dim}, std::move(v));
    }
};

/// Block-average downsample, additive Gaussian noise, optional uniform
/// quantization, clamp to [0, 1]. `x_h` is a square patch in row-major order.
inline std::vector<float> degrade(std::span<const float> x_h, const DegradationParams& params, Rng& rng) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(x_h.size()))));
    const std::size_t f = params.downsample_factor;
    if (side * side != x_h.size()) throw dimension_error("degrade: input of size " + std::to_string(x_h.size()) + " is not square");
    if (f == 0 || side % f != 0)
        throw dimension_error("degrade: factor " + std::to_string(f) + " does not divide side " + std::to_string(side));
    const std::size_t lo = side / f;
    std::vector<float> out(lo * lo);
    for (std::size_t by = 0; by < lo; ++by) {
        for (std::size_t bx = 0; bx < lo; ++bx) {
            double acc = 0.0;
            for (std::size_t y = 0; y < f; ++y)
                for (std::size_t x = 0; x < f; ++x) acc += x_h[(by * f + y) * side + bx * f + x];
            double v = acc / static_cast<double>(f * f);
            if (params.noise_std > 0.0) v += params.noise_std * rng.normal();
            if (params.quantize_levels) {
                const double levels = *params.quantize_levels - 1;
                v = std::round(v * levels) / levels;
            }
            out[by * lo + bx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

namespace detail {

// Procedural 16x16 texture: 0 stripes, 1 checkers, 2 band-limited noise.
inline std::vector<float> procedural_patch(Rng& rng, int& family) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const std::size_t n = kPatchSide;
    std::vector<float> p(n * n);
    family = static_cast<int>(rng.below(3));
    const double base = rng.uniform(0.35, 0.65);
    const double amp = rng.uniform(0.25, 0.45);
    auto fill = [&](auto fn) {
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x)
                p[y * n + x] = static_cast<float>(std::clamp(base + amp * fn(double(x), double(y)), 0.0, 1.0));
    };
    if (family == 0) {
        const double freq = rng.uniform(1.5, 5.0) / n, theta = rng.uniform(0.0, std::numbers::pi);
        const double phase = rng.uniform(0.0, two_pi);
        fill([&](double x, double y) {
            return std::sin(two_pi * freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
        });
    } else if (family == 1) {
        const double freq = rng.uniform(1.0, 4.0) / n;
        const double px = rng.uniform(0.0, two_pi), py = rng.uniform(0.0, two_pi);
        fill([&](double x, double y) {
            const double s = std::sin(two_pi * freq * x + px) * std::sin(two_pi * freq * y + py);
            return std::tanh(4.0 * s);
        });
    } else {
        constexpr int waves = 6;
        double fx[waves], fy[waves], ph[waves];
        for (int k = 0; k < waves; ++k) {
            const double f = rng.uniform(2.0, 6.0) / n, th = rng.uniform(0.0, two_pi);
            fx[k] = f * std::cos(th);
            fy[k] = f * std::sin(th);
            ph[k] = rng.uniform(0.0, two_pi);
        }
        fill([&](double x, double y) {
            double s = 0.0;
            for (int k = 0; k < waves; ++k) s += std::sin(two_pi * (fx[k] * x + fy[k] * y) + ph[k]);
            return s / std::sqrt(double(waves) / 2.0);
        });
    }
    return p;
}

}  // namespace detail

/// Observation for the 2D tasks: projection onto `direction` plus noise.
inline constexpr double kObservationNoise = 0.1;

inline ToyDataset generate_dataset(const std::string& name, std::size_t n, std::uint64_t seed,
                                   const DegradationParams& degradation = {}) {
    if (n == 0) throw std::invalid_argument("generate_dataset: n must be >= 1");
    ToyDataset ds;
    ds.name = name;
    ds.seed = seed;
    ds.labels.resize(n);
    if (name == kTwoMoons || name == kGaussianMixture) {
        ds.hr_shape = {2};
        ds.lr_shape = {1};
        ds.hr.resize(2 * n);
        ds.lr.resize(n);
        const bool moons = name == kTwoMoons;
        const double dir_angle = moons ? 0.0 : std::numbers::pi / 6.0;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(seed, i));
            double x, y;
            const int label = moons ? static_cast<int>(rng.below(2)) : static_cast<int>(rng.below(8));
            if (moons) {
                const double a = rng.uniform(0.0, std::numbers::pi);
                x = label == 0 ? std::cos(a) : 1.0 - std::cos(a);
                y = label == 0 ? std::sin(a) : 0.5 - std::sin(a);
                x += 0.1 * rng.normal() - 0.5;
                y += 0.1 * rng.normal() - 0.25;
            } else {
                const double a = 2.0 * std::numbers::pi * label / 8.0;
                x = 2.0 * std::cos(a) + 0.15 * rng.normal();
                y = 2.0 * std::sin(a) + 0.15 * rng.normal();
            }
            ds.labels[i] = label;
            ds.hr[2 * i] = static_cast<float>(x);
            ds.hr[2 * i + 1] = static_cast<float>(y);
            ds.lr[i] = static_cast<float>(x * std::cos(dir_angle) + y * std::sin(dir_angle) +
                                          kObservationNoise * rng.normal());
        }
    } else if (name == kTinyPatches) {
        const std::size_t f = degradation.downsample_factor;
        if (f == 0 || kPatchSide % f != 0)
            throw dimension_error("tiny-patches: factor " + std::to_string(f) + " does not divide 16");
        const std::size_t lo = kPatchSide / f;
        ds.hr_shape = {kPatchSide, kPatchSide};
        ds.lr_shape = {lo, lo};
        ds.hr.resize(n * kPatchSide * kPatchSide);
        ds.lr.resize(n * lo * lo);
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(seed, i));
            auto patch = detail::procedural_patch(rng, ds.labels[i]);
            auto obs = degrade(patch, degradation, rng);
            std::copy(patch.begin(), patch.end(), ds.hr.begin() + i * patch.size());
            std::copy(obs.begin(), obs.end(), ds.lr.begin() + i * obs.size());
        }
    } else {
        throw config_error("unknown dataset '" + name + "'");
    }
    return ds;
}

// ---------------------------------------------------------------- conditions

/// Encoded observation plus a presence channel; the dropped condition is
/// all zeros (presence included).
struct ConditionVector {
    std::vector<float> values;
    bool is_null = false;
};

inline std::size_t condition_dim(std::size_t lr_dim) { return lr_dim + 1; }

inline ConditionVector null_condition(std::size_t lr_dim) {
    return {std::vector<float>(condition_dim(lr_dim), 0.0f), true};
}

inline ConditionVector encode_condition(std::span<const float> x_l, double dropout_p, Rng& rng) {
    if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) throw std::invalid_argument("encode_condition: dropout_p outside [0,1]");
    // Always consume one draw so the stream does not depend on dropout_p.
    const bool drop = rng.uniform() < dropout_p;
    if (drop) return null_condition(x_l.size());
    ConditionVector c;
    c.values.assign(x_l.begin(), x_l.end());
    c.values.push_back(1.0f);
    return c;
}

/// Condition rows for a batch of observations [n, lr_dim] -> [n, lr_dim + 1].
inline Tensor<float> encode_batch(const Tensor<float>& x_l, double dropout_p, Rng& rng) {
    const std::size_t n = x_l.rows(), d = x_l.cols();
    std::vector<float> v;
    v.reserve(n * (d + 1));
    for (std::size_t r = 0; r < n; ++r) {
        auto c = encode_condition(x_l.values().subspan(r * d, d), dropout_p, rng);
        v.insert(v.end(), c.values.begin(), c.values.end());
    }
    return Tensor<float>(Shape{n, d + 1}, std::move(v));
}

template <class T>
Tensor<T> null_batch(std::size_t n, std::size_t cond_dim) {
    return Tensor<T>::zeros(Shape{n, cond_dim});
}

// ---------------------------------------------------------------- file format
//
// "SMFD" | version u32 | name length u32 + bytes | n u64 |
// rank u32 + dims u64 (x_h) | rank u32 + dims u64 (x_l) |
// per sample: x_h floats then x_l floats (f32 little-endian).

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const ToyDataset& ds, const std::string& path) {
    ByteWriter w;
    w.bytes("SMFD");
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.name.size()));
    w.bytes(ds.name);
    w.u64(ds.size());
    for (const Shape* s : {&ds.hr_shape, &ds.lr_shape}) {
        w.u32(static_cast<std::uint32_t>(s->size()));
        for (auto d : *s) w.u64(d);
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        w.f32s(ds.hr_row(i));
        w.f32s(ds.lr_row(i));
    }
    w.save(path);
}

/// Labels and seed are not part of the file; they come back empty/zero.
inline ToyDataset load_dataset(const std::string& path) {
    auto r = ByteReader::open(path);
    if (r.bytes(4) != "SMFD") throw format_error("dataset: bad magic in " + path);
    if (auto v = r.u32(); v != kDatasetVersion) throw format_error("dataset: unsupported version " + std::to_string(v));
    ToyDataset ds;
    ds.name = r.bytes(r.u32());
    const std::uint64_t n = r.u64();
    for (Shape* s : {&ds.hr_shape, &ds.lr_shape}) {
        const auto rank = r.u32();
        if (rank > 8) throw format_error("dataset: implausible rank " + std::to_string(rank));
        for (std::uint32_t k = 0; k < rank; ++k) s->push_back(r.u64());
    }
    const std::size_t per = ds.hr_dim() + ds.lr_dim();
    if (per == 0 || r.remaining() != n * per * 4)
        throw format_error("dataset: payload size mismatch in " + path);
    ds.hr.reserve(n * ds.hr_dim());
    ds.lr.reserve(n * ds.lr_dim());
    for (std::uint64_t i = 0; i < n; ++i) {
        auto h = r.f32s(ds.hr_dim());
        auto l = r.f32s(ds.lr_dim());
        ds.hr.insert(ds.hr.end(), h.begin(), h.end());
        ds.lr.insert(ds.lr.end(), l.begin(), l.end());
    }
    return ds;
}

}  // namespace smf
