#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace smf {

// Counter-based 64-bit generator. Output i of stream `seed` is
//   mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)
// with the SplitMix64 finalizer (shifts 30/27/31, multipliers
// 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Any implementation using these
// constants reproduces the same streams bit for bit.
inline constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

inline constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Seed for an independent sub-stream, e.g. derive_seed(master, "distill").
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
    return mix64(seed ^ mix64(fnv1a(tag)));
}

inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    return mix64(seed ^ mix64(index + 0x632BE59BD9B4E019ULL));
}

class Rng {
public:
    using result_type = std::uint64_t;

    explicit constexpr Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    constexpr result_type operator()() noexcept {
        ++counter_;
        return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller; both variates are used.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Independent generator for a named sub-task; does not advance this one.
    Rng split(std::string_view tag) const noexcept { return Rng(derive_seed(seed_ ^ counter_, tag)); }
    Rng split(std::uint64_t index) const noexcept { return Rng(derive_seed(seed_ ^ counter_, index)); }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace smf
