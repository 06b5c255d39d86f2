#pragma once

// Flow matching on the linear path z_t = (1 - t) x + t eps.
// t = 1 is pure noise, t = 0 is data; samplers integrate from 1 down to 0.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "nn.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace smf {

struct range_error : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct divergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_time(double t, const char* where) {
    if (!(t >= 0.0 && t <= 1.0)) throw range_error(std::string(where) + ": t=" + std::to_string(t) + " outside [0,1]");
}

/// Per-row interpolation; t[i] applies to row i.
template <class T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, std::span<const T> t) {
    for (T ti : t) check_time(static_cast<double>(ti), "interpolate");
    std::vector<T> one_minus(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) one_minus[i] = T(1) - t[i];
    return scale_rows(x, std::span<const T>(one_minus)) + scale_rows(eps, t);
}

template <class T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, double t) {
    std::vector<T> ts(x.rows(), static_cast<T>(t));
    return interpolate(x, eps, std::span<const T>(ts));
}

/// v = eps - x; constant along the linear path.
template <class T>
Tensor<T> instantaneous_velocity(const Tensor<T>& x, const Tensor<T>& eps) {
    return eps - x;
}

template <class T>
Tensor<T> gaussian_like(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<T> v(rows * cols);
    for (auto& e : v) e = static_cast<T>(rng.normal());
    return Tensor<T>(Shape{rows, cols}, std::move(v));
}

// ---------------------------------------------------------------- time embedding

/// Sinusoidal features of t: sin and cos at dim/2 log-spaced angular
/// frequencies between 1 and kMaxTimeFrequency.
inline constexpr double kMaxTimeFrequency = 30.0;

template <class T>
Tensor<T> time_embedding(std::span<const T> t, std::size_t dim) {
    if (dim == 0 || dim % 2) throw dimension_error("time_embedding: dim must be even and positive");
    const std::size_t half = dim / 2;
    std::vector<T> v(t.size() * dim);
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = half == 1 ? 1.0 : std::pow(kMaxTimeFrequency, double(k) / double(half - 1));
            const double a = freq * static_cast<double>(t[r]);
            v[r * dim + k] = static_cast<T>(std::sin(a));
            v[r * dim + half + k] = static_cast<T>(std::cos(a));
        }
    }
    return Tensor<T>(Shape{t.size(), dim}, std::move(v));
}

// ---------------------------------------------------------------- teacher

struct ModelDims {
    std::size_t state_dim = 2;
    std::size_t cond_dim = 2;
    std::size_t embed_dim = 16;
    std::vector<std::size_t> hidden = {128, 128, 128};

    std::vector<std::size_t> layer_sizes() const {
        std::vector<std::size_t> s{state_dim + embed_dim + cond_dim};
        s.insert(s.end(), hidden.begin(), hidden.end());
        s.push_back(state_dim);
        return s;
    }
    bool operator==(const ModelDims&) const = default;
};

/// Linear pathway added to the network output: g(t) z + input * L, where the
/// scalar gain g(t) = emb(t) . w + b. Starts at zero so the model begins as the
/// plain network.
template <class T>
struct SkipPath {
    Tensor<T> gain_w;  // [embed, 1]
    Tensor<T> gain_b;  // [1]
    Tensor<T> linear;  // [input, state]

    static SkipPath zeros(const ModelDims& d) {
        const std::size_t in = d.layer_sizes().front();
        return {Tensor<T>::parameter(Shape{d.embed_dim, 1}, std::vector<T>(d.embed_dim, T(0))),
                Tensor<T>::parameter(Shape{1}, std::vector<T>{T(0)}),
                Tensor<T>::parameter(Shape{in, d.state_dim}, std::vector<T>(in * d.state_dim, T(0)))};
    }

    void check(const ModelDims& d) const {
        if (gain_w.shape() != Shape{d.embed_dim, 1} || gain_b.shape() != Shape{1} ||
            linear.shape() != Shape{d.layer_sizes().front(), d.state_dim})
            throw dimension_error("SkipPath: parameter shapes do not match dims");
    }

    Tensor<T> apply(const Tensor<T>& z, const Tensor<T>& emb, const Tensor<T>& input,
                    const Tensor<T>* gain_offset = nullptr) const {
        auto g = affine(emb, gain_w, gain_b);
        if (gain_offset) g = g + *gain_offset;
        return scale_rows(z, g) + matmul(input, linear);
    }

    std::vector<Tensor<T>> params() const { return {gain_w, gain_b, linear}; }

    template <class U>
    SkipPath<U> cast() const {
        return {gain_w.template cast<U>(), gain_b.template cast<U>(), linear.template cast<U>()};
    }
};

/// Instantaneous velocity v(z, t; cond) over concatenated (z, emb(t), cond).
template <class T>
class TeacherModel {
public:
    TeacherModel() = default;
    TeacherModel(ModelDims dims, Rng& rng)
        : dims_(std::move(dims)), net_(dims_.layer_sizes(), rng), skip_(SkipPath<T>::zeros(dims_)) {}
    TeacherModel(ModelDims dims, Mlp<T> net, SkipPath<T> skip)
        : dims_(std::move(dims)), net_(std::move(net)), skip_(std::move(skip)) {
        if (net_.layer_sizes() != dims_.layer_sizes()) throw dimension_error("TeacherModel: network does not match dims");
        skip_.check(dims_);
    }

    Tensor<T> velocity(const Tensor<T>& z, std::span<const T> t, const Tensor<T>& cond) const {
        check_inputs(z, t.size(), cond);
        auto emb = time_embedding<T>(t, dims_.embed_dim);
        auto input = concat_cols<T>({z, emb, cond});
        return net_.forward(input) + skip_.apply(z, emb, input);
    }

    Tensor<T> velocity(const Tensor<T>& z, double t, const Tensor<T>& cond) const {
        std::vector<T> ts(z.rows(), static_cast<T>(t));
        return velocity(z, std::span<const T>(ts), cond);
    }

    const ModelDims& dims() const { return dims_; }
    const Mlp<T>& net() const { return net_; }
    Mlp<T>& net() { return net_; }
    const SkipPath<T>& skip() const { return skip_; }

    /// Network parameters in layer order, then the skip gain weight, gain bias
    /// and linear map.
    std::vector<Tensor<T>>& params() {
        sync();
        return all_;
    }
    const std::vector<Tensor<T>>& params() const {
        sync();
        return all_;
    }
    std::vector<std::string> param_names() const {
        auto names = net_.param_names("teacher.");
        for (const char* n : {"teacher.skip.gain_w", "teacher.skip.gain_b", "teacher.skip.linear"}) names.emplace_back(n);
        return names;
    }

    template <class U>
    TeacherModel<U> cast() const {
        return TeacherModel<U>(dims_, net_.template cast<U>(), skip_.template cast<U>());
    }
    TeacherModel clone() const { return cast<T>(); }

private:
    void check_inputs(const Tensor<T>& z, std::size_t nt, const Tensor<T>& cond) const {
        if (z.cols() != dims_.state_dim)
            throw dimension_error("velocity: state width " + std::to_string(z.cols()) + ", expected " +
                                  std::to_string(dims_.state_dim));
        if (cond.cols() != dims_.cond_dim || cond.rows() != z.rows())
            throw dimension_error("velocity: condition shape " + shape_str(cond.shape()));
        if (nt != z.rows()) throw dimension_error("velocity: " + std::to_string(nt) + " times for " + std::to_string(z.rows()) + " rows");
    }

    void sync() const {
        all_ = net_.params();
        for (auto& p : skip_.params()) all_.push_back(p);
    }

    ModelDims dims_;
    Mlp<T> net_;
    SkipPath<T> skip_;
    mutable std::vector<Tensor<T>> all_;
};

/// w * v_cond + (1 - w) * v_uncond, evaluated as v_uncond + w (v_cond - v_uncond)
/// in double so that w = 1 and w = 0 return the branches exactly and equal
/// branches are reproduced for every w. Values only (no gradient).
template <class T>
Tensor<T> combine_guidance(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, double w) {
    std::vector<T> out(v_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double c = v_cond.values()[i], u = v_uncond.values()[i];
        out[i] = static_cast<T>(u + w * (c - u));
    }
    return Tensor<T>(v_cond.shape(), std::move(out));
}

template <class T>
Tensor<T> cfg_velocity(const TeacherModel<T>& model, const Tensor<T>& z, std::span<const T> t, const Tensor<T>& cond,
                       double w) {
    auto v_cond = model.velocity(z, t, cond);
    auto v_uncond = model.velocity(z, t, null_batch<T>(z.rows(), model.dims().cond_dim));
    return combine_guidance(v_cond, v_uncond, w);
}

/// Plain conditional velocity when `w` is empty, guided otherwise. Values only.
template <class T>
Tensor<T> teacher_velocity(const TeacherModel<T>& model, const Tensor<T>& z, std::span<const T> t,
                           const Tensor<T>& cond, std::optional<double> w) {
    NoGradGuard no_grad;
    if (w) return cfg_velocity(model, z, t, cond, *w);
    return model.velocity(z, t, cond);
}

// ---------------------------------------------------------------- objective

/// Mean over the batch of ||v(z_t, t) - (eps - x)||^2.
template <class T>
Tensor<T> fm_loss(const TeacherModel<T>& model, const Tensor<T>& x, const Tensor<T>& eps, std::span<const T> t,
                  const Tensor<T>& cond) {
    if (x.rows() == 0) throw std::invalid_argument("fm_loss: empty batch");
    auto z_t = interpolate(x, eps, t);
    return mean_sq_norm(model.velocity(z_t, t, cond), instantaneous_velocity(x, eps));
}

// ---------------------------------------------------------------- sampling

enum class Scheme { euler, midpoint };

struct SamplerConfig {
    int num_steps = 100;
    Scheme scheme = Scheme::euler;
    std::optional<double> guidance_scale;
};

template <class T>
struct SampleResult {
    Tensor<T> final_state;
    std::vector<Tensor<T>> trajectory;  // num_steps + 1 states, starting at t = 1
};

/// Integrates dz/dt = field(z, t) from t = 1 down to t = 0 with uniform steps.
/// `field(const Tensor<T>& z, double t) -> Tensor<T>`.
template <class T, class Field>
SampleResult<T> ode_sample(Field&& field, const Tensor<T>& z_start, const SamplerConfig& config) {
    if (config.num_steps < 1) throw std::invalid_argument("ode_sample: num_steps must be >= 1");
    const int steps = config.num_steps;
    const double dt = 1.0 / steps;
    SampleResult<T> out{stop_gradient(z_start), {}};
    out.trajectory.push_back(out.final_state);
    std::vector<T> z(z_start.values().begin(), z_start.values().end());
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - k * dt;
        Tensor<T> cur(z_start.shape(), z);
        Tensor<T> v;
        if (config.scheme == Scheme::euler) {
            v = field(cur, t);
        } else {
            auto v1 = field(cur, t);
            std::vector<T> mid(z.size());
            for (std::size_t i = 0; i < z.size(); ++i) mid[i] = static_cast<T>(z[i] - 0.5 * dt * v1.values()[i]);
            v = field(Tensor<T>(z_start.shape(), std::move(mid)), t - 0.5 * dt);
        }
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = static_cast<T>(z[i] - dt * v.values()[i]);
            if (!std::isfinite(static_cast<double>(z[i])))
                throw divergence_error("ode_sample: non-finite state at step " + std::to_string(k));
        }
        out.trajectory.emplace_back(z_start.shape(), z);
    }
    out.final_state = out.trajectory.back();
    return out;
}

/// Multi-step teacher sampling from noise under fixed conditions.
template <class T>
Tensor<T> teacher_sample(const TeacherModel<T>& model, const Tensor<T>& eps, const Tensor<T>& cond,
                         const SamplerConfig& config) {
    NoGradGuard no_grad;
    auto field = [&](const Tensor<T>& z, double t) {
        std::vector<T> ts(z.rows(), static_cast<T>(t));
        return teacher_velocity(model, z, std::span<const T>(ts), cond, config.guidance_scale);
    };
    return ode_sample<T>(field, eps, config).final_state;
}

// ---------------------------------------------------------------- training

struct LossRecord {
    std::uint64_t iteration = 0;
    std::string tag;
    double value = 0.0;
};

struct TeacherTrainConfig {
    ModelDims dims;
    std::uint64_t iterations = 4000;
    std::size_t batch_size = 256;
    AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0};
    double cond_dropout = 0.2;
    std::uint64_t seed = 0;
};

template <class T>
struct TeacherTrainResult {
    TeacherModel<T> model;
    std::vector<LossRecord> losses;
};

/// Uniform minibatch indices drawn with replacement.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    return idx;
}

inline TeacherTrainResult<float> train_teacher(const ToyDataset& data, const TeacherTrainConfig& config) {
    if (data.size() == 0) throw std::invalid_argument("train_teacher: empty dataset");
    ModelDims dims = config.dims;
    dims.state_dim = data.hr_dim();
    dims.cond_dim = condition_dim(data.lr_dim());
    Rng rng(config.seed);
    Rng init_rng = rng.split("init");
    TeacherTrainResult<float> out{TeacherModel<float>(dims, init_rng), {}};
    auto& model = out.model;
    AdamW<float> opt(model.params(), config.optimizer);
    const auto names = model.param_names();
    for (std::uint64_t it = 0; it < config.iterations; ++it) {
        auto idx = sample_indices(data.size(), config.batch_size, rng);
        auto x = data.hr_batch(idx);
        auto cond = encode_batch(data.lr_batch(idx), config.cond_dropout, rng);
        auto eps = gaussian_like<float>(x.rows(), x.cols(), rng);
        std::vector<float> t(x.rows());
        for (auto& ti : t) ti = static_cast<float>(rng.uniform());
        zero_grad(model);
        auto loss = fm_loss(model, x, eps, std::span<const float>(t), cond);
        const double value = loss.item();
        if (!std::isfinite(value)) throw divergence_error("train_teacher: loss is NaN at iteration " + std::to_string(it));
        backward(loss);
        opt.step(model.params(), names);
        out.losses.push_back({it, "fm", value});
    }
    return out;
}

}  // namespace smf
