#pragma once

// Stage 1: an average-velocity student u(z_t, r, t; cond) distilled from a
// flow-matching teacher with the interval-splitting and boundary losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "flow.hpp"
#include "nn.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace smf {

/// u(z, r, t; cond). The network is the teacher's layout over
/// (z, emb(t), cond); emb(r) enters through its own projection that is
/// summed into the first pre-activation.
template <class T>
class StudentModel {
public:
    StudentModel() = default;

    StudentModel(ModelDims dims, Rng& rng)
        : dims_(std::move(dims)), net_(dims_.layer_sizes(), rng), skip_(SkipPath<T>::zeros(dims_)) {
        r_proj_ = uniform_parameter<T>(Shape{dims_.embed_dim, dims_.hidden.front()}, dims_.embed_dim, rng);
        r_gain_ = Tensor<T>::parameter(Shape{dims_.embed_dim, 1}, std::vector<T>(dims_.embed_dim, T(0)));
    }

    StudentModel(ModelDims dims, Mlp<T> net, SkipPath<T> skip, Tensor<T> r_proj, Tensor<T> r_gain)
        : dims_(std::move(dims)), net_(std::move(net)), skip_(std::move(skip)), r_proj_(std::move(r_proj)),
          r_gain_(std::move(r_gain)) {
        if (dims_.hidden.empty()) throw dimension_error("StudentModel: need at least one hidden layer");
        if (net_.layer_sizes() != dims_.layer_sizes()) throw dimension_error("StudentModel: network does not match dims");
        skip_.check(dims_);
        if (r_proj_.shape() != Shape{dims_.embed_dim, dims_.hidden.front()})
            throw dimension_error("StudentModel: r projection shape " + shape_str(r_proj_.shape()));
        if (r_gain_.shape() != Shape{dims_.embed_dim, 1})
            throw dimension_error("StudentModel: r gain shape " + shape_str(r_gain_.shape()));
    }

    /// Copies the teacher's weights; the r pathways start at zero so that
    /// u(z, r, t) = v(z, t) for every r at initialization.
    static StudentModel from_teacher(const TeacherModel<T>& teacher) {
        const auto& d = teacher.dims();
        return StudentModel(d, teacher.net().clone(), teacher.skip().template cast<T>(),
                            Tensor<T>::parameter(Shape{d.embed_dim, d.hidden.front()},
                                                 std::vector<T>(d.embed_dim * d.hidden.front(), T(0))),
                            Tensor<T>::parameter(Shape{d.embed_dim, 1}, std::vector<T>(d.embed_dim, T(0))));
    }

    Tensor<T> average_velocity(const Tensor<T>& z, std::span<const T> r, std::span<const T> t,
                               const Tensor<T>& cond) const {
        if (z.cols() != dims_.state_dim)
            throw dimension_error("average_velocity: state width " + std::to_string(z.cols()) + ", expected " +
                                  std::to_string(dims_.state_dim));
        if (cond.cols() != dims_.cond_dim || cond.rows() != z.rows())
            throw dimension_error("average_velocity: condition shape " + shape_str(cond.shape()));
        if (r.size() != z.rows() || t.size() != z.rows()) throw dimension_error("average_velocity: time count mismatch");
        auto emb_r = time_embedding<T>(r, dims_.embed_dim);
        auto emb_t = time_embedding<T>(t, dims_.embed_dim);
        auto offset = matmul(emb_r, r_proj_);
        auto gain_offset = matmul(emb_r, r_gain_);
        auto input = concat_cols<T>({z, emb_t, cond});
        return net_.forward(input, &offset) + skip_.apply(z, emb_t, input, &gain_offset);
    }

    Tensor<T> average_velocity(const Tensor<T>& z, double r, double t, const Tensor<T>& cond) const {
        std::vector<T> rs(z.rows(), static_cast<T>(r)), ts(z.rows(), static_cast<T>(t));
        return average_velocity(z, std::span<const T>(rs), std::span<const T>(ts), cond);
    }

    const ModelDims& dims() const { return dims_; }
    const Mlp<T>& net() const { return net_; }
    const SkipPath<T>& skip() const { return skip_; }
    const Tensor<T>& r_projection() const { return r_proj_; }
    const Tensor<T>& r_gain() const { return r_gain_; }

    /// Network parameters in layer order, the skip path, then the r pathways.
    std::vector<Tensor<T>>& params() {
        sync();
        return all_;
    }
    const std::vector<Tensor<T>>& params() const {
        sync();
        return all_;
    }
    std::vector<std::string> param_names() const {
        auto names = net_.param_names("student.");
        for (const char* n : {"student.skip.gain_w", "student.skip.gain_b", "student.skip.linear",
                              "student.r_projection", "student.r_gain"})
            names.emplace_back(n);
        return names;
    }

    template <class U>
    StudentModel<U> cast() const {
        return StudentModel<U>(dims_, net_.template cast<U>(), skip_.template cast<U>(), r_proj_.template cast<U>(),
                               r_gain_.template cast<U>());
    }
    StudentModel clone() const { return cast<T>(); }

private:
    void sync() const {
        all_ = net_.params();
        for (auto& p : skip_.params()) all_.push_back(p);
        all_.push_back(r_proj_);
        all_.push_back(r_gain_);
    }

    ModelDims dims_;
    Mlp<T> net_;
    SkipPath<T> skip_;
    Tensor<T> r_proj_;
    Tensor<T> r_gain_;
    mutable std::vector<Tensor<T>> all_;
};

// ---------------------------------------------------------------- intervals

/// 0 <= r <= s <= t <= 1 with s = (1 - lambda) t + lambda r.
struct Interval {
    double r = 0.0, s = 0.0, t = 0.0, lambda = 0.0;

    static Interval from_lambda(double r, double t, double lambda) {
        if (!(0.0 <= r && r <= t && t <= 1.0)) throw range_error("Interval: need 0 <= r <= t <= 1");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw range_error("Interval: lambda outside [0,1]");
        const double s = std::clamp((1.0 - lambda) * t + lambda * r, r, t);
        return {r, s, t, lambda};
    }
};

struct IntervalSampling {
    /// Probability of forcing (r, t) = (0, 1), the interval used at inference.
    double full_interval_prob = 0.25;
};

/// r, t: sorted pair of independent uniforms (or the full interval with
/// probability full_interval_prob); lambda ~ U(0, 1).
inline Interval sample_interval(Rng& rng, const IntervalSampling& cfg = {}) {
    double a = rng.uniform(), b = rng.uniform();
    const bool full = rng.uniform() < cfg.full_interval_prob;
    const double lambda = rng.uniform();
    if (a > b) std::swap(a, b);
    if (full) {
        a = 0.0;
        b = 1.0;
    }
    return Interval::from_lambda(a, b, lambda);
}

template <class T>
struct IntervalColumns {
    std::vector<T> r, s, t, lambda;
};

template <class T>
IntervalColumns<T> columns(const std::vector<Interval>& iv) {
    IntervalColumns<T> c;
    for (const auto& i : iv) {
        c.r.push_back(static_cast<T>(i.r));
        c.s.push_back(static_cast<T>(i.s));
        c.t.push_back(static_cast<T>(i.t));
        c.lambda.push_back(static_cast<T>(i.lambda));
    }
    return c;
}

/// z_s = z_t - (t - s) u, row by row, for a precomputed u.
template <class T>
Tensor<T> jump(const Tensor<T>& z_t, std::span<const T> s, std::span<const T> t, const Tensor<T>& u) {
    std::vector<T> width(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] > t[i]) throw range_error("backward_integrate: s > t");
        width[i] = t[i] - s[i];
    }
    return z_t - scale_rows(u, std::span<const T>(width));
}

/// One backward jump z_s = z_t - (t - s) u(z_t, s, t).
template <class T>
Tensor<T> backward_integrate(const StudentModel<T>& student, const Tensor<T>& z_t, std::span<const T> s,
                             std::span<const T> t, const Tensor<T>& cond) {
    return jump(z_t, s, t, student.average_velocity(z_t, s, t, cond));
}

// ---------------------------------------------------------------- losses

/// The detached splitting target (1 - lambda) u(z_s, r, s) + lambda u(z_t, s, t),
/// with z_s reached by a jump along u(z_t, s, t).
template <class T>
Tensor<T> isc_target(const StudentModel<T>& model, const Tensor<T>& z_t, const IntervalColumns<T>& c,
                     const Tensor<T>& cond) {
    NoGradGuard no_grad;
    auto u2 = model.average_velocity(z_t, c.s, c.t, cond);
    auto z_s = jump(z_t, std::span<const T>(c.s), std::span<const T>(c.t), u2);
    auto u1 = model.average_velocity(z_s, c.r, c.s, cond);
    std::vector<T> one_minus(c.lambda.size());
    for (std::size_t i = 0; i < one_minus.size(); ++i) one_minus[i] = T(1) - c.lambda[i];
    return stop_gradient(scale_rows(u1, std::span<const T>(one_minus)) + scale_rows(u2, std::span<const T>(c.lambda)));
}

/// ||u(z_t, r, t) - sg[(1 - lambda) u1 + lambda u2]||^2 averaged over the batch.
/// `target_model` (default: the student itself) evaluates the detached
/// target; passing a frozen copy makes the target a constant of the
/// student's parameters, which is what stop-gradient means.
template <class T>
Tensor<T> isc_loss(const StudentModel<T>& student, const Tensor<T>& z_t, const std::vector<Interval>& intervals,
                   const Tensor<T>& cond, const StudentModel<T>* target_model = nullptr) {
    if (intervals.size() != z_t.rows()) throw dimension_error("isc_loss: one interval per row required");
    auto c = columns<T>(intervals);
    auto target = isc_target(target_model ? *target_model : student, z_t, c, cond);
    auto pred = student.average_velocity(z_t, c.r, c.t, cond);
    return mean_sq_norm(pred, target);
}

/// ||u(z_t, t, t) - v_teacher^w(z_t, t)||^2; no guidance when `w` is empty.
template <class T>
Tensor<T> boundary_loss(const StudentModel<T>& student, const TeacherModel<T>& teacher, const Tensor<T>& z_t,
                        std::span<const T> t, const Tensor<T>& cond, std::optional<double> w) {
    auto target = teacher_velocity(teacher, z_t, t, cond, w);
    return mean_sq_norm(student.average_velocity(z_t, t, t, cond), target);
}

// ---------------------------------------------------------------- sampling

/// z = eps - u(eps, 0, 1); a single network evaluation.
template <class T>
Tensor<T> one_step_sample(const StudentModel<T>& student, const Tensor<T>& eps, const Tensor<T>& cond) {
    return eps - student.average_velocity(eps, 0.0, 1.0, cond);
}

/// k equal jumps from t = 1 to t = 0.
template <class T>
Tensor<T> multi_step_sample(const StudentModel<T>& student, const Tensor<T>& eps, const Tensor<T>& cond, int k) {
    if (k < 1) throw std::invalid_argument("multi_step_sample: k must be >= 1");
    NoGradGuard no_grad;
    Tensor<T> z = eps;
    for (int i = 0; i < k; ++i) {
        const double t = 1.0 - double(i) / k, s = 1.0 - double(i + 1) / k;
        std::vector<T> ss(z.rows(), static_cast<T>(s)), ts(z.rows(), static_cast<T>(t));
        z = backward_integrate(student, z, std::span<const T>(ss), std::span<const T>(ts), cond);
    }
    return z;
}

// ---------------------------------------------------------------- diagnostics

/// Max over trials and coordinates of
///   |(t - r) u(z_t, r, t) - (s - r) u(z_s, r, s) - (t - s) u(z_t, s, t)|,
/// z_s = z_t - (t - s) u(z_t, s, t).
/// `field(z, r, t) -> Tensor<double>` evaluates a batch of average velocities.
template <class Field>
double isc_residual_scan(Field&& field, int n_trials, std::size_t dim, Rng& rng, const IntervalSampling& cfg = {}) {
    std::vector<Interval> iv;
    for (int i = 0; i < n_trials; ++i) iv.push_back(sample_interval(rng, cfg));
    auto c = columns<double>(iv);
    auto z_t = gaussian_like<double>(static_cast<std::size_t>(n_trials), dim, rng);
    const std::span<const double> r(c.r), s(c.s), t(c.t);
    Tensor<double> u_st = field(z_t, s, t);
    Tensor<double> u_rt = field(z_t, r, t);
    auto z_s = jump(z_t, s, t, u_st);
    Tensor<double> u_rs = field(z_s, r, s);
    double worst = 0.0;
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const std::size_t row = i / dim;
        const double lhs = (t[row] - r[row]) * u_rt.values()[i];
        const double rhs = (s[row] - r[row]) * u_rs.values()[i] + (t[row] - s[row]) * u_st.values()[i];
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    return worst;
}

/// Residual of the splitting identity at one fixed interval for a z-free field.
template <class Field>
double isc_residual_at(const Field& f, double r, double s, double t) {
    return std::abs((t - r) * f.u(0.0, r, t) - (s - r) * f.u(0.0, r, s) - (t - s) * f.u(0.0, s, t));
}

/// A trained student viewed as a batched double-precision field for the scans.
template <class T>
auto student_field(const StudentModel<T>& student, const Tensor<T>& cond_row) {
    return [&student, cond_row](const Tensor<double>& z, std::span<const double> r, std::span<const double> t) {
        NoGradGuard no_grad;
        const std::size_t n = z.rows();
        std::vector<T> zc(z.values().begin(), z.values().end()), rc(r.begin(), r.end()), tc(t.begin(), t.end());
        std::vector<T> cv;
        for (std::size_t i = 0; i < n; ++i) cv.insert(cv.end(), cond_row.values().begin(), cond_row.values().end());
        auto u = student.average_velocity(Tensor<T>(z.shape(), std::move(zc)), std::span<const T>(rc),
                                          std::span<const T>(tc), Tensor<T>(Shape{n, cond_row.cols()}, std::move(cv)));
        return Tensor<double>(z.shape(), std::vector<double>(u.values().begin(), u.values().end()));
    };
}

// ---------------------------------------------------------------- training

/// Which branch `q < p` selects. The literal reading of the training
/// pseudocode is the default: q < p runs splitting consistency.
enum class BranchRule { split_below_p, boundary_below_p };

struct Stage1Config {
    double branch_probability = 0.6;
    BranchRule branch_rule = BranchRule::split_below_p;
    std::optional<double> guidance_scale;  // CFG inside the boundary loss; off by default
    std::uint64_t iterations = 4000;
    std::size_t batch_size = 256;
    AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0};
    IntervalSampling intervals;
    double cond_dropout = 0.0;
    std::uint64_t seed = 0;
};

inline constexpr const char* kSplitBranch = "split";
inline constexpr const char* kBoundaryBranch = "boundary";

/// True when q selects the splitting branch under `rule`.
inline bool is_split_branch(double q, double p, BranchRule rule) {
    return rule == BranchRule::split_below_p ? q < p : !(q < p);
}

struct Stage1Step {
    std::string branch;
    double loss = 0.0;
};

/// Draws one minibatch of (x_h, cond), per-row intervals, noise and the branch
/// variable q, in that order.
struct Stage1Batch {
    Tensor<float> x;
    Tensor<float> cond;
    std::vector<Interval> intervals;
    Tensor<float> eps;
    double q = 0.0;
};

inline Stage1Batch draw_stage1_batch(const ToyDataset& data, std::size_t batch, const Stage1Config& config, Rng& rng) {
    auto idx = sample_indices(data.size(), batch, rng);
    Stage1Batch b;
    b.x = data.hr_batch(idx);
    b.cond = encode_batch(data.lr_batch(idx), config.cond_dropout, rng);
    for (std::size_t i = 0; i < batch; ++i) b.intervals.push_back(sample_interval(rng, config.intervals));
    b.eps = gaussian_like<float>(b.x.rows(), b.x.cols(), rng);
    b.q = rng.uniform();
    return b;
}

/// The stage-1 objective for one batch (splitting or boundary branch).
inline Tensor<float> stage1_loss(const StudentModel<float>& student, const TeacherModel<float>& teacher,
                                 const Stage1Batch& b, bool split, std::optional<double> guidance) {
    std::vector<float> t(b.intervals.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(b.intervals[i].t);
    auto z_t = interpolate(b.x, b.eps, std::span<const float>(t));
    if (split) return isc_loss(student, z_t, b.intervals, b.cond);
    return boundary_loss(student, teacher, z_t, std::span<const float>(t), b.cond, guidance);
}

/// One optimizer update of the student following the branch-sampled rule.
inline Stage1Step stage1_train_step(StudentModel<float>& student, const TeacherModel<float>& teacher,
                                    const ToyDataset& data, const Stage1Config& config, AdamW<float>& opt, Rng& rng) {
    if (!(config.branch_probability >= 0.0 && config.branch_probability <= 1.0))
        throw std::invalid_argument("stage1: branch probability outside [0,1]");
    auto b = draw_stage1_batch(data, config.batch_size, config, rng);
    const bool split = is_split_branch(b.q, config.branch_probability, config.branch_rule);
    const char* tag = split ? kSplitBranch : kBoundaryBranch;
    zero_grad(student);
    auto loss = stage1_loss(student, teacher, b, split, config.guidance_scale);
    const double value = loss.item();
    if (!std::isfinite(value)) throw divergence_error(std::string("stage1: non-finite loss in ") + tag + " branch");
    backward(loss);
    opt.step(student.params(), student.param_names());
    return {tag, value};
}

struct Stage1Result {
    StudentModel<float> student;
    std::vector<LossRecord> losses;
    std::uint64_t split_steps = 0;
};

inline Stage1Result train_student(const TeacherModel<float>& teacher, const ToyDataset& data, const Stage1Config& config) {
    if (data.size() == 0) throw std::invalid_argument("train_student: empty dataset");
    auto frozen = teacher.clone();
    set_trainable(frozen, false);
    Stage1Result out{StudentModel<float>::from_teacher(teacher), {}, 0};
    AdamW<float> opt(out.student.params(), config.optimizer);
    Rng rng(config.seed);
    for (std::uint64_t it = 0; it < config.iterations; ++it) {
        auto step = stage1_train_step(out.student, frozen, data, config, opt, rng);
        if (step.branch == kSplitBranch) ++out.split_steps;
        out.losses.push_back({it, step.branch, step.loss});
    }
    return out;
}

}  // namespace smf
