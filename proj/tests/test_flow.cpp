#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "oracle.hpp"
#include "smf/analytic.hpp"
#include "smf/flow.hpp"

using namespace smf;

namespace {

ModelDims tiny_dims(std::size_t state = 1, std::size_t cond = 2) {
    ModelDims d;
    d.state_dim = state;
    d.cond_dim = cond;
    d.embed_dim = 4;
    d.hidden = {6, 5};
    return d;
}

// Teacher whose velocity is the constant `out` for every input.
TeacherModel<double> constant_teacher(const ModelDims& d, std::vector<double> out) {
    Rng rng(0);
    TeacherModel<double> m(d, rng);
    for (auto& p : m.params())
        for (auto& v : p.values()) v = 0.0;
    auto& last_bias = m.params()[2 * (d.hidden.size() + 1) - 1];
    for (std::size_t i = 0; i < out.size(); ++i) last_bias.values()[i] = out[i];
    return m;
}

Tensor<double> ones_cond(std::size_t n, std::size_t c) { return Tensor<double>::full({n, c}, 1.0); }

}  // namespace

TEST(Interpolate, Endpoints) {
    Rng rng(1);
    auto x = oracle::random_leaf({4, 3}, rng), eps = oracle::random_leaf({4, 3}, rng);
    auto z0 = interpolate(x, eps, 0.0), z1 = interpolate(x, eps, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(z0.values()[i], x.values()[i]);
        EXPECT_EQ(z1.values()[i], eps.values()[i]);
    }
}

TEST(Interpolate, HandValueAndRange) {
    auto x = Tensor<double>({1, 1}, {2.0}), eps = Tensor<double>({1, 1}, {0.0});
    EXPECT_DOUBLE_EQ(interpolate(x, eps, 0.25).item(), 1.5);
    EXPECT_THROW(interpolate(x, eps, 1.5), range_error);
    EXPECT_THROW(interpolate(x, eps, -0.1), range_error);
}

TEST(Interpolate, PerRowTimesAndConvexity) {
    Rng rng(2);
    auto x = oracle::random_leaf({5, 2}, rng), eps = oracle::random_leaf({5, 2}, rng);
    std::vector<double> t = {0.0, 0.1, 0.5, 0.9, 1.0};
    auto z = interpolate(x, eps, std::span<const double>(t));
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 2; ++c)
            EXPECT_NEAR(z(r, c), (1 - t[r]) * x(r, c) + t[r] * eps(r, c), 1e-15);
}

TEST(Velocity, Examples) {
    auto a = Tensor<double>({1, 2}, {0.3, -1.0});
    auto v = instantaneous_velocity(a, a);
    for (double e : v.values()) EXPECT_EQ(e, 0.0);
    auto x = Tensor<double>({1, 1}, {0.0}), e = Tensor<double>({1, 1}, {1.0});
    EXPECT_EQ(instantaneous_velocity(x, e).item(), 1.0);
}

TEST(FmLoss, PerfectAndZeroPredictor) {
    const auto d = tiny_dims();
    auto x = Tensor<double>({1, 1}, {1.0}), eps = Tensor<double>({1, 1}, {3.0});
    const double t[] = {0.4};
    auto perfect = constant_teacher(d, {2.0});
    EXPECT_NEAR(fm_loss(perfect, x, eps, std::span<const double>(t), ones_cond(1, 2)).item(), 0.0, 1e-15);
    auto zero = constant_teacher(d, {0.0});
    auto e0 = Tensor<double>({1, 1}, {0.0});
    EXPECT_DOUBLE_EQ(fm_loss(zero, x, e0, std::span<const double>(t), ones_cond(1, 2)).item(), 1.0);
}

TEST(FmLoss, BatchIsMeanOfSampleLosses) {
    Rng rng(3);
    const auto d = tiny_dims(2, 2);
    TeacherModel<double> m(d, rng);
    auto x = oracle::random_leaf({2, 2}, rng), eps = oracle::random_leaf({2, 2}, rng), c = oracle::random_leaf({2, 2}, rng);
    const std::vector<double> t = {0.3, 0.8};
    const double batch = fm_loss(m, x, eps, std::span<const double>(t), c).item();
    double separate = 0.0;
    for (std::size_t r = 0; r < 2; ++r) {
        auto row = [&](const Tensor<double>& a) { return Tensor<double>({1, 2}, {a(r, 0), a(r, 1)}); };
        auto v = m.velocity(interpolate(row(x), row(eps), t[r]), t[r], row(c));
        for (std::size_t k = 0; k < 2; ++k) {
            const double target = eps(r, k) - x(r, k);
            separate += (v(0, k) - target) * (v(0, k) - target);
        }
    }
    EXPECT_NEAR(batch, separate / 2.0, 1e-12);
}

TEST(FmLoss, GradientMatchesFiniteDifferences) {
    Rng rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        TeacherModel<double> m(tiny_dims(2, 3), rng);
        for (auto& p : m.params())
            for (auto& v : p.values()) v += 0.1 * rng.normal();  // skip path away from zero
        auto x = oracle::random_leaf({3, 2}, rng), eps = oracle::random_leaf({3, 2}, rng), c = oracle::random_leaf({3, 3}, rng);
        std::vector<double> t = {rng.uniform(), rng.uniform(), rng.uniform()};
        worst = std::max(worst, grad_check(m, [&](auto& model) { return fm_loss(model, x, eps, std::span<const double>(t), c); }));
    }
    EXPECT_LE(worst, 1e-3);
}

TEST(OdeSample, ConstantFieldOneStep) {
    auto eps = Tensor<double>({2, 1}, {0.5, -1.0});
    auto field = [](const Tensor<double>& z, double) { return Tensor<double>::full(z.shape(), 0.75); };
    auto res = ode_sample<double>(field, eps, {1, Scheme::euler, std::nullopt});
    EXPECT_DOUBLE_EQ(res.final_state(0, 0), 0.5 - 0.75);
    EXPECT_DOUBLE_EQ(res.final_state(1, 0), -1.0 - 0.75);
    EXPECT_EQ(res.trajectory.size(), 2u);
}

TEST(OdeSample, PointMassReachedForAnyStepCount) {
    Rng rng(5);
    auto eps = oracle::random_leaf({8, 2}, rng);
    const double x0[] = {0.7, -1.2};
    std::vector<double> v(eps.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps.values()[i] - x0[i % 2];
    auto field = [&](const Tensor<double>& z, double) { return Tensor<double>(z.shape(), v); };
    for (int n : {1, 2, 7, 100}) {
        for (auto scheme : {Scheme::euler, Scheme::midpoint}) {
            auto z = ode_sample<double>(field, eps, {n, scheme, std::nullopt}).final_state;
            for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z.values()[i], x0[i % 2], 1e-12);
        }
    }
}

// dz/dt = -z + cos(3t) has no closed form along the reversed direction we
// integrate, so the reference is a 10,000-step midpoint solve.
TEST(OdeSample, EulerIsFirstOrderMidpointSecondOrder) {
    auto field = [](const Tensor<double>& z, double t) {
        std::vector<double> v(z.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = -z.values()[i] + std::cos(3.0 * t);
        return Tensor<double>(z.shape(), std::move(v));
    };
    auto start = Tensor<double>({1, 1}, {0.8});
    const double ref = ode_sample<double>(field, start, {10000, Scheme::midpoint, std::nullopt}).final_state.item();
    auto err = [&](int n, Scheme s) {
        return std::abs(ode_sample<double>(field, start, {n, s, std::nullopt}).final_state.item() - ref);
    };
    for (int n : {20, 40, 80}) {
        const double ratio = err(n, Scheme::euler) / err(2 * n, Scheme::euler);
        EXPECT_NEAR(ratio, 2.0, 0.2) << n;
        const double ratio2 = err(n, Scheme::midpoint) / err(2 * n, Scheme::midpoint);
        EXPECT_NEAR(ratio2, 4.0, 0.4) << n;
    }
}

TEST(OdeSample, NonFiniteStateNamesStep) {
    auto field = [](const Tensor<double>& z, double t) {
        return Tensor<double>::full(z.shape(), t < 0.55 ? std::nan("") : 0.0);
    };
    try {
        ode_sample<double>(field, Tensor<double>({1, 1}, {0.0}), {10, Scheme::euler, std::nullopt});
        FAIL();
    } catch (const divergence_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 5"), std::string::npos) << e.what();
    }
    EXPECT_THROW(ode_sample<double>(field, Tensor<double>({1, 1}, {0.0}), {0, Scheme::euler, std::nullopt}),
                 std::invalid_argument);
}

TEST(OdeSample, DeterministicTrajectory) {
    Rng rng(6);
    TeacherModel<float> m(tiny_dims(2, 2), rng);
    auto eps = gaussian_like<float>(16, 2, rng);
    auto cond = gaussian_like<float>(16, 2, rng);
    auto field = [&](const Tensor<float>& z, double t) { return m.velocity(z, t, cond); };
    auto a = ode_sample<float>(field, eps, {25, Scheme::euler, std::nullopt});
    auto b = ode_sample<float>(field, eps, {25, Scheme::euler, std::nullopt});
    ASSERT_EQ(a.trajectory.size(), 26u);
    for (std::size_t k = 0; k < a.trajectory.size(); ++k)
        EXPECT_EQ(0, std::memcmp(a.trajectory[k].values().data(), b.trajectory[k].values().data(), 32 * sizeof(float)));
}

TEST(Cfg, EndpointsAndDegenerateCase) {
    Rng rng(7);
    TeacherModel<float> m(tiny_dims(2, 3), rng);
    auto z = gaussian_like<float>(5, 2, rng), c = gaussian_like<float>(5, 3, rng);
    std::vector<float> t(5, 0.3f);
    auto v_cond = m.velocity(z, std::span<const float>(t), c);
    auto v_unc = m.velocity(z, std::span<const float>(t), null_batch<float>(5, 3));
    auto w1 = cfg_velocity(m, z, std::span<const float>(t), c, 1.0);
    auto w0 = cfg_velocity(m, z, std::span<const float>(t), c, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
        EXPECT_EQ(w1.values()[i], v_cond.values()[i]);
        EXPECT_EQ(w0.values()[i], v_unc.values()[i]);
    }
    for (double w : {-1.0, 0.0, 0.5, 1.0, 4.5, 7.5}) {
        auto out = combine_guidance(v_cond, v_cond, w);
        for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(out.values()[i], v_cond.values()[i]) << w;
    }
}

TEST(Cfg, AffineMixingValue) {
    auto c = Tensor<double>({1, 2}, {1.0, 2.0}), u = Tensor<double>({1, 2}, {0.5, -1.0});
    auto g = combine_guidance(c, u, 4.5);
    EXPECT_DOUBLE_EQ(g(0, 0), 4.5 * 1.0 + (1 - 4.5) * 0.5);
    EXPECT_DOUBLE_EQ(g(0, 1), 4.5 * 2.0 + (1 - 4.5) * -1.0);
}

TEST(FlowIdentity, AnalyticFields) {
    Rng rng(8);
    EXPECT_LE(analytic::flow_identity_residual(analytic::ConstantField{}, 1000, rng), 1e-4);
    EXPECT_LE(analytic::flow_identity_residual(analytic::LinearTimeField{}, 1000, rng), 1e-4);
    EXPECT_LE(analytic::flow_identity_residual(analytic::ExponentialField{}, 1000, rng), 1e-4);
}

TEST(TimeEmbedding, BoundedAndDistinct) {
    const float t[] = {0.0f, 0.5f, 1.0f};
    auto e = time_embedding<float>(std::span<const float>(t), 8);
    EXPECT_EQ(e.shape(), (Shape{3, 8}));
    for (float v : e.values()) EXPECT_LE(std::abs(v), 1.0f);
    EXPECT_NE(e(0, 0), e(1, 0));
}

TEST(TrainTeacher, ZeroIterationsReturnsInitialization) {
    const auto data = generate_dataset(kTwoMoons, 64, 1);
    TeacherTrainConfig cfg;
    cfg.iterations = 0;
    cfg.dims.hidden = {8, 8};
    cfg.seed = 99;
    auto res = train_teacher(data, cfg);
    ModelDims d = cfg.dims;
    d.state_dim = 2;
    d.cond_dim = 2;
    Rng init = Rng(99).split("init");
    TeacherModel<float> fresh(d, init);
    ASSERT_EQ(res.model.params().size(), fresh.params().size());
    for (std::size_t i = 0; i < fresh.params().size(); ++i)
        EXPECT_EQ(0, std::memcmp(res.model.params()[i].values().data(), fresh.params()[i].values().data(),
                                 fresh.params()[i].size() * sizeof(float)));
    EXPECT_TRUE(res.losses.empty());
}

TEST(TrainTeacher, PointMassEndpoint) {
    ToyDataset data;
    data.name = "point-mass";
    data.hr_shape = {2};
    data.lr_shape = {1};
    const float x0[] = {0.6f, -0.4f};
    for (int i = 0; i < 256; ++i) {
        data.hr.insert(data.hr.end(), {x0[0], x0[1]});
        data.lr.push_back(0.0f);
        data.labels.push_back(0);
    }
    TeacherTrainConfig cfg;
    cfg.iterations = 1500;
    cfg.dims.hidden = {64, 64};
    cfg.seed = 5;
    auto teacher = train_teacher(data, cfg).model;
    Rng rng(6);
    auto eps = gaussian_like<float>(256, 2, rng);
    auto cond = encode_batch(Tensor<float>::zeros({256, 1}), 0.0, rng);
    auto z = teacher_sample(teacher, eps, cond, {});
    double err = 0.0;
    for (std::size_t r = 0; r < 256; ++r) err += std::hypot(double(z(r, 0)) - x0[0], double(z(r, 1)) - x0[1]);
    EXPECT_LE(err / 256.0, 0.05);
}
