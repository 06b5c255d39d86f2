#pragma once

// Closed-form velocity fields with known average velocities, used as
// oracles for the interval-splitting and flow identities.

#include <cmath>
#include <span>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace smf::analytic {

/// v(z, tau) = c; u = c.
struct ConstantField {
    double c = 1.0;
    double v(double, double) const { return c; }
    double u(double, double, double) const { return c; }
    double transport(double z, double from, double to) const { return z + (to - from) * c; }
};

/// v(z, tau) = a * tau; u(z, r, t) = a (t + r) / 2.
struct LinearTimeField {
    double a = 2.0;
    double v(double, double t) const { return a * t; }
    double u(double, double r, double t) const { return a * (t + r) / 2.0; }
    double transport(double z, double from, double to) const { return z + a * (to * to - from * from) / 2.0; }
};

/// v(z, tau) = k z; trajectories z_tau = z_t exp(k (tau - t)),
/// u(z_t, r, t) = z_t (1 - exp(k (r - t))) / (t - r), and u = k z at r = t.
struct ExponentialField {
    double k = 0.7;
    double v(double z, double) const { return k * z; }
    double u(double z, double r, double t) const {
        const double d = t - r;
        if (std::abs(d) < 1e-12) return k * z;
        return -z * std::expm1(-k * d) / d;
    }
    double transport(double z, double from, double to) const { return z * std::exp(k * (to - from)); }
};

/// Deliberately not an average velocity: u(z, r, t) = t^2.
struct WrongField {
    double u(double, double, double t) const { return t * t; }
};

/// Evaluates a scalar field row by row as a batched average-velocity model.
template <class T, class Field>
Tensor<T> evaluate_u(const Field& f, const Tensor<T>& z, std::span<const T> r, std::span<const T> t) {
    std::vector<T> out(z.size());
    const std::size_t m = z.cols();
    for (std::size_t i = 0; i < z.size(); ++i)
        out[i] = static_cast<T>(f.u(static_cast<double>(z.values()[i]), static_cast<double>(r[i / m]),
                                    static_cast<double>(t[i / m])));
    return Tensor<T>(z.shape(), std::move(out));
}

/// Max over trials of |u - (v - (t - r) du/dt)| with the total derivative
/// du/dt along the trajectory through z_t taken by central differences.
template <class Field>
double flow_identity_residual(const Field& f, int trials, Rng& rng, double h = 1e-4) {
    double worst = 0.0;
    for (int i = 0; i < trials; ++i) {
        const double z = 2.0 * rng.normal();
        double r = rng.uniform(), t = rng.uniform();
        if (r > t) std::swap(r, t);
        const double up = f.u(f.transport(z, t, t + h), r, t + h);
        const double down = f.u(f.transport(z, t, t - h), r, t - h);
        const double dudt = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(f.u(z, r, t) - (f.v(z, t) - (t - r) * dudt)));
    }
    return worst;
}

}  // namespace smf::analytic
