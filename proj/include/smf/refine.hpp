#pragma once

// Stage 2: adversarial and distribution-matching refinement of the one-step
// student. Each step runs three sequential sub-updates with their own
// optimizers: student -> regularizer -> discriminator.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "flow.hpp"
#include "isc.hpp"
#include "nn.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace smf {

/// Trainable copy of the teacher that tracks the student's output distribution.
template <class T>
using RegularizerModel = TeacherModel<T>;

template <class T>
RegularizerModel<T> make_regularizer(const TeacherModel<T>& teacher) {
    auto reg = teacher.clone();
    set_trainable(reg, true);
    return reg;
}

// ---------------------------------------------------------------- weights

struct LossWeights {
    double isc = 1.0;             // lambda1
    double reconstruction = 1.0;  // lambda2
    double vsd = 1.0;             // lambda3
    double adversarial = 0.5;     // lambda4

    void validate() const {
        if (isc < 0 || reconstruction < 0 || vsd < 0 || adversarial < 0)
            throw std::invalid_argument("LossWeights: weights must be nonnegative");
    }
    LossWeights scaled(double k) const { return {isc * k, reconstruction * k, vsd * k, adversarial * k}; }
};

/// omega(t): constant 1, or piecewise-linear through `table` at evenly
/// spaced t in [0, 1].
struct WeightSchedule {
    std::vector<double> table;

    static WeightSchedule constant(double v = 1.0) { return {{v, v}}; }

    double operator()(double t) const {
        if (table.empty()) return 1.0;
        if (table.size() == 1) return table.front();
        const double x = std::clamp(t, 0.0, 1.0) * static_cast<double>(table.size() - 1);
        const auto i = std::min(static_cast<std::size_t>(x), table.size() - 2);
        const double f = x - static_cast<double>(i);
        return (1.0 - f) * table[i] + f * table[i + 1];
    }

    void validate() const {
        for (double v : table)
            if (!(v >= 0.0)) throw std::invalid_argument("WeightSchedule: omega(t) must be nonnegative");
    }
};

// ---------------------------------------------------------------- VSD

struct VsdConfig {
    double t_min = 0.02;
    double t_max = 0.98;
    std::optional<double> teacher_guidance;  // CFG on the teacher branch
    WeightSchedule schedule;
};

/// d(L_vsd)/d(z_hat) for a batch, from two velocity fields
/// `real(z_t, t) -> Tensor<T>` (teacher) and `fake(z_t, t)` (regularizer):
///   omega(t) (v_real(z_t, t) - v_fake(z_t, t)) (1 - t) / (n d),
/// with z_t = (1 - t) z_hat + t eps and one t per row. The 1/(n d) averages
/// over elements the same way the pixel MSE of the reconstruction term does.
/// No scalar loss is formed.
template <class T, class Real, class Fake>
std::vector<T> vsd_gradient_from(Real&& real, Fake&& fake, const Tensor<T>& z_hat, const VsdConfig& config, Rng& rng) {
    NoGradGuard no_grad;
    const std::size_t n = z_hat.rows(), d = z_hat.cols();
    std::vector<T> t(n);
    for (auto& ti : t) ti = static_cast<T>(rng.uniform(config.t_min, config.t_max));
    auto eps = gaussian_like<T>(n, d, rng);
    auto z_t = interpolate(stop_gradient(z_hat), eps, std::span<const T>(t));
    const Tensor<T> v_real = real(z_t, std::span<const T>(t));
    const Tensor<T> v_fake = fake(z_t, std::span<const T>(t));
    std::vector<T> g(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        const double scale = config.schedule(t[r]) * (1.0 - static_cast<double>(t[r])) / static_cast<double>(n * d);
        for (std::size_t k = 0; k < d; ++k) {
            const std::size_t i = r * d + k;
            g[i] = static_cast<T>(scale * (static_cast<double>(v_real.values()[i]) - static_cast<double>(v_fake.values()[i])));
        }
    }
    return g;
}

template <class T>
std::vector<T> vsd_gradient(const Tensor<T>& z_hat, const TeacherModel<T>& teacher, const RegularizerModel<T>& regularizer,
                            const Tensor<T>& cond, const VsdConfig& config, Rng& rng) {
    return vsd_gradient_from<T>(
        [&](const Tensor<T>& z, std::span<const T> t) { return teacher_velocity(teacher, z, t, cond, config.teacher_guidance); },
        [&](const Tensor<T>& z, std::span<const T> t) { return teacher_velocity(regularizer, z, t, cond, std::nullopt); },
        z_hat, config, rng);
}

/// Flow-matching loss of the regularizer on detached student samples.
template <class T>
Tensor<T> regularizer_loss(const RegularizerModel<T>& regularizer, const Tensor<T>& z_hat, const Tensor<T>& cond, Rng& rng) {
    auto x = stop_gradient(z_hat);
    std::vector<T> t(x.rows());
    for (auto& ti : t) ti = static_cast<T>(rng.uniform());
    auto eps = gaussian_like<T>(x.rows(), x.cols(), rng);
    return fm_loss(regularizer, x, eps, std::span<const T>(t), cond);
}

// ---------------------------------------------------------------- adversarial

enum class DiscriminatorInput { raw, patch_features };

/// Three-layer scorer. Patch inputs are reduced to 4x4-pooled intensity and
/// 4x4-pooled squared-gradient energy before the network.
template <class T>
class Discriminator {
public:
    static constexpr std::size_t kPool = 4;
    static constexpr double kEnergyScale = 10.0;

    Discriminator() = default;

    Discriminator(std::size_t sample_dim, DiscriminatorInput input, std::size_t hidden, Rng& rng)
        : Discriminator(sample_dim, input, Mlp<T>({feature_dim(sample_dim, input), hidden, hidden, 1}, rng)) {}

    Discriminator(std::size_t sample_dim, DiscriminatorInput input, Mlp<T> net)
        : sample_dim_(sample_dim), input_(input), net_(std::move(net)) {
        if (net_.input_size() != feature_dim(sample_dim, input) || net_.output_size() != 1)
            throw dimension_error("Discriminator: network does not match input features");
        if (input_ == DiscriminatorInput::patch_features) build_operators();
    }

    static std::size_t feature_dim(std::size_t sample_dim, DiscriminatorInput input) {
        if (input == DiscriminatorInput::raw) return sample_dim;
        const auto side = patch_side(sample_dim);
        return 2 * (side / kPool) * (side / kPool);
    }

    /// One score per row: [n, sample_dim] -> [n, 1].
    Tensor<T> score(const Tensor<T>& x) const {
        if (x.cols() != sample_dim_)
            throw dimension_error("Discriminator: sample width " + std::to_string(x.cols()) + ", expected " +
                                  std::to_string(sample_dim_));
        if (input_ == DiscriminatorInput::raw) return net_.forward(x);
        auto pooled = matmul(x, pool_);
        auto energy = matmul(square(matmul(x, diff_)), energy_pool_);
        return net_.forward(concat_cols<T>({pooled, energy}));
    }

    std::size_t sample_dim() const { return sample_dim_; }
    DiscriminatorInput input() const { return input_; }
    const Mlp<T>& net() const { return net_; }
    std::vector<Tensor<T>>& params() { return net_.params(); }
    const std::vector<Tensor<T>>& params() const { return net_.params(); }
    std::vector<std::string> param_names() const { return net_.param_names("discriminator."); }

    template <class U>
    Discriminator<U> cast() const {
        return Discriminator<U>(sample_dim_, input_, net_.template cast<U>());
    }

private:
    static std::size_t patch_side(std::size_t dim) {
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dim))));
        if (side * side != dim || side % kPool) throw dimension_error("Discriminator: patch side must be a multiple of 4");
        return side;
    }

    // pool_: [d, cells] block average. diff_: [d, 2d] circular horizontal and
    // vertical differences. energy_pool_: [2d, cells] block average of both.
    void build_operators() {
        const std::size_t side = patch_side(sample_dim_), d = sample_dim_, cells_side = side / kPool;
        const std::size_t cells = cells_side * cells_side;
        const double inv = 1.0 / double(kPool * kPool);
        std::vector<T> pool(d * cells, T(0)), diff(d * 2 * d, T(0)), energy(2 * d * cells, T(0));
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t x = 0; x < side; ++x) {
                const std::size_t p = y * side + x, cell = (y / kPool) * cells_side + x / kPool;
                pool[p * cells + cell] = static_cast<T>(inv);
                const std::size_t right = y * side + (x + 1) % side, down = ((y + 1) % side) * side + x;
                diff[right * 2 * d + p] += T(1);
                diff[p * 2 * d + p] -= T(1);
                diff[down * 2 * d + d + p] += T(1);
                diff[p * 2 * d + d + p] -= T(1);
                energy[p * cells + cell] = static_cast<T>(inv * kEnergyScale);
                energy[(d + p) * cells + cell] = static_cast<T>(inv * kEnergyScale);
            }
        }
        pool_ = Tensor<T>(Shape{d, cells}, std::move(pool));
        diff_ = Tensor<T>(Shape{d, 2 * d}, std::move(diff));
        energy_pool_ = Tensor<T>(Shape{2 * d, cells}, std::move(energy));
    }

    std::size_t sample_dim_ = 0;
    DiscriminatorInput input_ = DiscriminatorInput::raw;
    Mlp<T> net_;
    Tensor<T> pool_, diff_, energy_pool_;
};

/// -mean(scores of generated samples)
template <class T>
Tensor<T> hinge_generator_loss(const Tensor<T>& fake_scores) {
    return -mean(fake_scores);
}

/// mean(max(0, 1 - real)) + mean(max(0, 1 + fake))
template <class T>
Tensor<T> hinge_discriminator_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
    return mean(relu(add_scalar(-real_scores, 1.0))) + mean(relu(add_scalar(fake_scores, 1.0)));
}

template <class Disc, class T>
Tensor<T> gan_generator_loss(const Disc& disc, const Tensor<T>& fake) {
    return hinge_generator_loss(disc.score(fake));
}

template <class Disc, class T>
Tensor<T> gan_discriminator_loss(const Disc& disc, const Tensor<T>& real, const Tensor<T>& fake) {
    return hinge_discriminator_loss(disc.score(real), disc.score(fake));
}

// ---------------------------------------------------------------- reconstruction

inline constexpr std::uint64_t kFeatureNetSeed = 0xFEA7;
inline constexpr std::size_t kFeatureHidden = 64;
inline constexpr std::size_t kFeatureOut = 32;

/// Frozen random two-layer network standing in for a perceptual metric.
template <class T>
Mlp<T> make_feature_net(std::size_t input_dim) {
    Rng rng(derive_seed(kFeatureNetSeed, input_dim));
    Mlp<T> net({input_dim, kFeatureHidden, kFeatureOut}, rng);
    set_trainable(net, false);
    return net;
}

/// Pixel MSE plus MSE between feature-net embeddings.
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& x_hat, const Tensor<T>& x, const Mlp<T>& feature_net) {
    if (x_hat.shape() != x.shape()) throw dimension_error("reconstruction_loss: shape mismatch");
    return mse(x_hat, x) + mse(feature_net.forward(x_hat), feature_net.forward(x));
}

/// Mean over rows of the Euclidean distance between feature embeddings.
template <class T>
double feature_distance(const Tensor<T>& a, const Tensor<T>& b, const Mlp<T>& feature_net) {
    NoGradGuard no_grad;
    auto fa = feature_net.forward(a), fb = feature_net.forward(b);
    const std::size_t d = fa.cols();
    double total = 0.0;
    for (std::size_t r = 0; r < fa.rows(); ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double x = double(fa.values()[r * d + k]) - double(fb.values()[r * d + k]);
            s += x * x;
        }
        total += std::sqrt(s);
    }
    return total / static_cast<double>(fa.rows());
}

// ---------------------------------------------------------------- training step

struct Stage2Config {
    LossWeights weights;
    VsdConfig vsd;
    std::uint64_t iterations = 2000;
    std::size_t batch_size = 64;
    AdamWConfig student_optimizer{1e-4, 0.9, 0.999, 1e-8, 0.0};
    AdamWConfig regularizer_optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0};
    AdamWConfig discriminator_optimizer{1e-4, 0.5, 0.999, 1e-8, 0.0};
    std::size_t regularizer_updates = 1;    // per step
    std::size_t discriminator_updates = 1;  // per step
    std::size_t discriminator_hidden = 128;
    // The ISC term keeps the stage-1 objective, including its branch rule.
    double branch_probability = 0.6;
    BranchRule branch_rule = BranchRule::split_below_p;
    std::optional<double> boundary_guidance;
    IntervalSampling intervals;
    std::uint64_t seed = 0;
};

struct Stage2Losses {
    double isc = 0, reconstruction = 0, vsd = 0, adversarial = 0, total = 0;
    double regularizer = 0, discriminator = 0;
};

struct Stage2Batch {
    Tensor<float> x;
    Tensor<float> cond;
    Tensor<float> eps;  // one-step generation noise
    Stage1Batch isc;    // data-path interval sample for the ISC term
};

/// Everything stage 2 trains, plus the frozen pieces it reads.
struct Stage2State {
    StudentModel<float> student;
    TeacherModel<float> teacher;  // frozen
    RegularizerModel<float> regularizer;
    Discriminator<float> discriminator;
    Mlp<float> feature_net;  // frozen
    AdamW<float> student_opt, regularizer_opt, discriminator_opt;

    static Stage2State create(const StudentModel<float>& student, const TeacherModel<float>& teacher,
                              const Stage2Config& config, DiscriminatorInput disc_input, Rng& init_rng) {
        Stage2State s;
        s.student = student.clone();
        s.teacher = teacher.clone();
        set_trainable(s.teacher, false);
        s.regularizer = make_regularizer(teacher);
        const std::size_t d = teacher.dims().state_dim;
        s.discriminator = Discriminator<float>(d, disc_input, config.discriminator_hidden, init_rng);
        s.feature_net = make_feature_net<float>(d);
        s.student_opt = AdamW<float>(s.student.params(), config.student_optimizer);
        s.regularizer_opt = AdamW<float>(s.regularizer.params(), config.regularizer_optimizer);
        s.discriminator_opt = AdamW<float>(s.discriminator.params(), config.discriminator_optimizer);
        return s;
    }
};

inline Stage2Batch draw_stage2_batch(const ToyDataset& data, const Stage2Config& config, Rng& rng) {
    Stage2Batch b;
    auto idx = sample_indices(data.size(), config.batch_size, rng);
    b.x = data.hr_batch(idx);
    b.cond = encode_batch(data.lr_batch(idx), 0.0, rng);
    b.eps = gaussian_like<float>(b.x.rows(), b.x.cols(), rng);
    Stage1Config isc_cfg;
    isc_cfg.intervals = config.intervals;
    b.isc = draw_stage1_batch(data, config.batch_size, isc_cfg, rng);
    return b;
}

inline void require_finite(double v, const char* component) {
    if (!std::isfinite(v)) throw divergence_error(std::string("stage2: non-finite ") + component + " loss");
}

/// (a) Student: lambda1 ISC + lambda2 Rec + lambda4 adversarial, with the
/// VSD gradient (times lambda3) injected at the one-step output. The ISC term
/// is the stage-1 loss of whichever branch the batch's q selects.
inline void stage2_student_update(Stage2State& s, const Stage2Batch& b, const Stage2Config& config, Rng& rng,
                                  Stage2Losses& out) {
    const auto& w = config.weights;
    set_trainable(s.discriminator, false);
    set_trainable(s.regularizer, false);
    zero_grad(s.student);

    auto z_hat = one_step_sample(s.student, b.eps, b.cond);
    const bool split = is_split_branch(b.isc.q, config.branch_probability, config.branch_rule);
    auto isc = stage1_loss(s.student, s.teacher, b.isc, split, config.boundary_guidance);
    auto rec = reconstruction_loss(z_hat, b.x, s.feature_net);
    auto adv = gan_generator_loss(s.discriminator, z_hat);
    auto total = isc * w.isc + rec * w.reconstruction + adv * w.adversarial;

    auto g = vsd_gradient(z_hat, s.teacher, s.regularizer, b.cond, config.vsd, rng);
    double vsd_sq = 0.0;
    for (auto v : g) vsd_sq += double(v) * double(v);
    out.isc = isc.item();
    out.reconstruction = rec.item();
    out.adversarial = adv.item();
    out.vsd = std::sqrt(vsd_sq);  // norm of the injected gradient
    out.total = total.item();
    require_finite(out.isc, "isc");
    require_finite(out.reconstruction, "reconstruction");
    require_finite(out.adversarial, "adversarial");
    require_finite(out.vsd, "vsd");

    for (auto& v : g) v = static_cast<float>(v * w.vsd);
    backward<float>({{total, {1.0f}}, {z_hat, std::move(g)}});
    s.student_opt.step(s.student.params(), s.student.param_names());
}

/// (b) Regularizer: flow matching on fresh, detached student samples.
inline void stage2_regularizer_update(Stage2State& s, const Stage2Batch& b, const Stage2Config& config, Rng& rng,
                                      Stage2Losses& out) {
    set_trainable(s.regularizer, true);
    Tensor<float> z_hat;
    {
        NoGradGuard no_grad;
        z_hat = one_step_sample(s.student, b.eps, b.cond);
    }
    for (std::size_t k = 0; k < config.regularizer_updates; ++k) {
        zero_grad(s.regularizer);
        auto loss = regularizer_loss(s.regularizer, z_hat, b.cond, rng);
        out.regularizer = loss.item();
        require_finite(out.regularizer, "regularizer");
        backward(loss);
        s.regularizer_opt.step(s.regularizer.params(), s.regularizer.param_names());
    }
    set_trainable(s.regularizer, false);
}

/// (c) Discriminator: hinge loss on data vs detached student samples.
inline void stage2_discriminator_update(Stage2State& s, const Stage2Batch& b, const Stage2Config& config,
                                        Stage2Losses& out) {
    set_trainable(s.discriminator, true);
    Tensor<float> z_hat;
    {
        NoGradGuard no_grad;
        z_hat = one_step_sample(s.student, b.eps, b.cond);
    }
    for (std::size_t k = 0; k < config.discriminator_updates; ++k) {
        zero_grad(s.discriminator);
        auto loss = gan_discriminator_loss(s.discriminator, b.x, z_hat);
        out.discriminator = loss.item();
        require_finite(out.discriminator, "discriminator");
        backward(loss);
        s.discriminator_opt.step(s.discriminator.params(), s.discriminator.param_names());
    }
    set_trainable(s.discriminator, false);
}

/// student -> regularizer -> discriminator, each reading what the previous wrote.
inline Stage2Losses stage2_train_step(Stage2State& s, const ToyDataset& data, const Stage2Config& config, Rng& rng) {
    config.weights.validate();
    config.vsd.schedule.validate();
    auto b = draw_stage2_batch(data, config, rng);
    Stage2Losses out;
    stage2_student_update(s, b, config, rng, out);
    stage2_regularizer_update(s, b, config, rng, out);
    stage2_discriminator_update(s, b, config, out);
    return out;
}

struct Stage2Result {
    Stage2State state;
    std::vector<LossRecord> losses;
};

inline Stage2Result train_stage2(const StudentModel<float>& student, const TeacherModel<float>& teacher,
                                 const ToyDataset& data, const Stage2Config& config) {
    Rng rng(config.seed);
    Rng init_rng = rng.split("init");
    const auto disc_input = data.hr_shape.size() == 2 ? DiscriminatorInput::patch_features : DiscriminatorInput::raw;
    Stage2Result res{Stage2State::create(student, teacher, config, disc_input, init_rng), {}};
    for (std::uint64_t it = 0; it < config.iterations; ++it) {
        auto l = stage2_train_step(res.state, data, config, rng);
        for (auto [tag, v] : {std::pair{"isc", l.isc}, {"reconstruction", l.reconstruction}, {"vsd", l.vsd},
                              {"adversarial", l.adversarial}, {"total", l.total}, {"regularizer", l.regularizer},
                              {"discriminator", l.discriminator}})
            res.losses.push_back({it, tag, v});
    }
    return res;
}

}  // namespace smf
