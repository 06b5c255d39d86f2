#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace smf {

/// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> uniform_parameter(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
}

/// Feed-forward network: affine layers with SiLU between them, linear output.
template <class T>
class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<std::size_t> layer_sizes, Rng& rng) : sizes_(std::move(layer_sizes)) {
        if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            params_.push_back(uniform_parameter<T>(Shape{sizes_[l], sizes_[l + 1]}, sizes_[l], rng));
            params_.push_back(uniform_parameter<T>(Shape{sizes_[l + 1]}, sizes_[l], rng));
        }
    }

    /// Wraps existing parameter tensors (weights and biases interleaved).
    Mlp(std::vector<std::size_t> layer_sizes, std::vector<Tensor<T>> params)
        : sizes_(std::move(layer_sizes)), params_(std::move(params)) {
        if (params_.size() != 2 * (sizes_.size() - 1))
            throw dimension_error("Mlp: expected " + std::to_string(2 * (sizes_.size() - 1)) + " tensors, got " +
                                  std::to_string(params_.size()));
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            if (params_[2 * l].shape() != Shape{sizes_[l], sizes_[l + 1]} ||
                params_[2 * l + 1].shape() != Shape{sizes_[l + 1]})
                throw dimension_error("Mlp: parameter shape mismatch at layer " + std::to_string(l));
        }
    }

    Tensor<T> forward(const Tensor<T>& input) const { return forward(input, nullptr); }

    /// `first_offset`, when given, is added to the first layer's
    /// pre-activation (an extra input pathway projected elsewhere).
    Tensor<T> forward(const Tensor<T>& input, const Tensor<T>* first_offset) const {
        if (input.cols() != sizes_.front())
            throw dimension_error("Mlp layer 0: expected input width " + std::to_string(sizes_.front()) + ", got " +
                                  std::to_string(input.cols()));
        Tensor<T> h = input;
        const std::size_t layers = sizes_.size() - 1;
        for (std::size_t l = 0; l < layers; ++l) {
            h = affine(h, params_[2 * l], params_[2 * l + 1]);
            if (l == 0 && first_offset) {
                if (first_offset->shape() != h.shape())
                    throw dimension_error("Mlp layer 0: offset shape " + shape_str(first_offset->shape()) +
                                          " vs pre-activation " + shape_str(h.shape()));
                h = h + *first_offset;
            }
            if (l + 1 < layers) h = silu(h);
        }
        return h;
    }

    const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
    std::size_t input_size() const { return sizes_.front(); }
    std::size_t output_size() const { return sizes_.back(); }

    std::vector<Tensor<T>>& params() { return params_; }
    const std::vector<Tensor<T>>& params() const { return params_; }

    std::vector<std::string> param_names(const std::string& prefix = "") const {
        std::vector<std::string> names;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            names.push_back(prefix + "layer" + std::to_string(l) + ".weight");
            names.push_back(prefix + "layer" + std::to_string(l) + ".bias");
        }
        return names;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    template <class U>
    Mlp<U> cast() const {
        std::vector<Tensor<U>> p;
        for (const auto& t : params_) p.push_back(t.template cast<U>());
        return Mlp<U>(sizes_, std::move(p));
    }

    Mlp clone() const { return cast<T>(); }

private:
    std::vector<std::size_t> sizes_;
    std::vector<Tensor<T>> params_;
};

/// Loose bag of tensors treated as parameters (e.g. to differentiate a loss
/// with respect to its inputs).
template <class T>
struct ParamSet {
    std::vector<Tensor<T>> tensors;

    std::vector<Tensor<T>>& params() { return tensors; }
    const std::vector<Tensor<T>>& params() const { return tensors; }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
        return out;
    }
};

template <class Model>
void zero_grad(Model& model) {
    for (auto& p : model.params()) p.zero_grad();
}

template <class Model>
void set_trainable(Model& model, bool on) {
    for (auto& p : model.params()) p.set_requires_grad(on);
}

/// Copies parameter values from `src` into `dst` (same architecture).
template <class Model>
void copy_params(const Model& src, Model& dst) {
    const auto& s = src.params();
    auto& d = dst.params();
    if (s.size() != d.size()) throw dimension_error("copy_params: parameter count mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i].shape() != d[i].shape()) throw dimension_error("copy_params: shape mismatch at tensor " + std::to_string(i));
        std::copy(s[i].values().begin(), s[i].values().end(), d[i].values().begin());
    }
}

template <class Model>
double grad_norm(const Model& model) {
    double s = 0.0;
    for (const auto& p : model.params())
        for (auto g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

struct AdamWConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Moment buffers are laid out to match
/// the parameter list given at construction.
template <class T>
class AdamW {
public:
    AdamW() = default;

    AdamW(const std::vector<Tensor<T>>& params, AdamWConfig config) : config_(config) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), T(0));
            v_.emplace_back(p.size(), T(0));
        }
    }

    /// One update from the gradients currently accumulated in `params`.
    /// `names` (optional) labels parameters in error messages.
    void step(std::vector<Tensor<T>>& params, const std::vector<std::string>& names = {}) {
        if (params.size() != m_.size())
            throw dimension_error("AdamW: optimizer built for " + std::to_string(m_.size()) + " tensors, got " +
                                  std::to_string(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (auto g : params[i].grad()) {
                if (!std::isfinite(static_cast<double>(g))) {
                    const std::string label = i < names.size() ? names[i] : "param" + std::to_string(i);
                    throw std::runtime_error("AdamW: non-finite gradient in parameter '" + label + "'");
                }
            }
        }
        ++step_;
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        const T decay = static_cast<T>(1.0 - config_.learning_rate * config_.weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].values();
            auto g = params[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * g[k]);
                v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * static_cast<double>(g[k]) * g[k]);
                const double mhat = m[k] / bias1;
                const double vhat = v[k] / bias2;
                w[k] *= decay;
                w[k] -= static_cast<T>(config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon));
            }
        }
    }

    std::uint64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return config_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    AdamWConfig config_;
    std::vector<std::vector<T>> m_, v_;
    std::uint64_t step_ = 0;
};

/// Max over every parameter element of
///   |autodiff - central difference| / (|central difference| + 1e-8).
///
/// `f(model)` must return a scalar tensor and be callable for both Model<float>
/// and Model<double>; both the reverse sweep and the perturbed re-evaluations
/// run on a float64 copy of `model`.
template <class ModelF, class F>
double grad_check(const ModelF& model, F&& f, double h = 1e-5) {
    auto m = model.template cast<double>();
    for (auto& p : m.params()) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    backward(f(m));
    double worst = 0.0;
    for (auto& p : m.params()) {
        auto vals = p.values();
        for (std::size_t k = 0; k < vals.size(); ++k) {
            const double saved = vals[k];
            vals[k] = saved + h;
            const double up = f(m).item();
            vals[k] = saved - h;
            const double down = f(m).item();
            vals[k] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double err = std::abs(p.grad()[k] - fd) / (std::abs(fd) + 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace smf
