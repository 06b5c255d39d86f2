#pragma once

// Test-side oracles that do not go through the library's own checkers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smf/random.hpp"
#include "smf/tensor.hpp"

namespace oracle {

using smf::Tensor;

inline Tensor<double> random_leaf(smf::Shape shape, smf::Rng& rng, double scale = 1.0) {
    std::vector<double> v(smf::shape_size(shape));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor<double>(std::move(shape), std::move(v), true);
}

/// Max relative error between reverse-mode gradients of `f(leaves)` and
/// central differences of the same function, over every leaf element.
inline double max_grad_error(std::vector<Tensor<double>> leaves,
                             const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                             double h = 1e-6) {
    for (auto& l : leaves) l.zero_grad();
    smf::backward(f(leaves));
    double worst = 0.0;
    for (auto& l : leaves) {
        if (!l.requires_grad()) continue;
        auto v = l.values();
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double saved = v[k];
            v[k] = saved + h;
            const double up = f(leaves).item();
            v[k] = saved - h;
            const double down = f(leaves).item();
            v[k] = saved;
            const double fd = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(l.grad()[k] - fd) / (std::abs(fd) + 1e-8));
        }
    }
    return worst;
}

/// sum(y * w) for a fixed random weight tensor, so every output element
/// gets a distinct upstream gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
    smf::Rng rng(seed);
    std::vector<double> w(y.size());
    for (auto& x : w) x = rng.normal();
    return smf::sum(y * Tensor<double>(y.shape(), std::move(w)));
}

}  // namespace oracle
