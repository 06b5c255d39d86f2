// Acceptance run: one PASS/FAIL line per criterion. Training criteria run the
// real pipeline on the shipped configs under ./acceptance_runs.
//
//   acceptance [criterion numbers...]     e.g. `acceptance 1 2 10`

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "smf/analytic.hpp"
#include "smf/pipeline.hpp"

using namespace smf;
namespace fs = std::filesystem;

namespace {

#ifndef SMF_SOURCE_DIR
#define SMF_SOURCE_DIR "."
#endif

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) { return format_number(v); }

ExperimentConfig shipped(const std::string& name, const std::string& out) {
    auto c = load_config(std::string(SMF_SOURCE_DIR) + "/configs/" + name);
    c.output_dir = (fs::path("acceptance_runs") / out).string();
    c.plots = false;
    return c;
}

double timed_stage(const ExperimentConfig& c, const std::string& stage) {
    std::ostringstream sink;
    PipelineOptions opt;
    opt.force = true;
    opt.log = &sink;
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(c, {stage}, opt);
    return seconds_since(t0);
}

TeacherModel<float> load_teacher_of(const ExperimentConfig& c) {
    return load_teacher((fs::path(c.output_dir) / artifact::teacher).string());
}
StudentModel<float> load_student_of(const ExperimentConfig& c, const char* file) {
    return load_student((fs::path(c.output_dir) / file).string());
}

ModelDims tiny_dims() {
    ModelDims d;
    d.state_dim = 2;
    d.cond_dim = 2;
    d.embed_dim = 4;
    d.hidden = {6, 5};
    return d;
}

Tensor<double> fixed(Shape s, Rng& rng, double scale = 1.0) {
    auto t = oracle::random_leaf(std::move(s), rng, scale);
    t.set_requires_grad(false);
    return t;
}

// ---------------------------------------------------------------- 1

Outcome isc_identity() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    auto as_field = [](auto f) {
        return [f](const Tensor<double>& z, std::span<const double> r, std::span<const double> t) {
            return analytic::evaluate_u(f, z, r, t);
        };
    };
    const double constant = isc_residual_scan(as_field(analytic::ConstantField{1.0}), 1000, 1, rng);
    const double linear = isc_residual_scan(as_field(analytic::LinearTimeField{2.0}), 1000, 1, rng);
    const double wrong = isc_residual_at(analytic::WrongField{}, 0.0, 0.5, 1.0);
    const double secs = seconds_since(t0);
    return {constant <= 1e-6 && linear <= 1e-6 && wrong >= 0.1 && secs < 1.0,
            "constant " + num(constant) + ", linear " + num(linear) + " (<= 1e-6); wrong field " + num(wrong) +
                " (>= 0.1); " + num(secs) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(202);
    const auto d = tiny_dims();
    std::map<std::string, double> worst;
    auto track = [&](const char* name, double e) { worst[name] = std::max(worst[name], e); };
    for (int trial = 0; trial < 100; ++trial) {
        TeacherModel<double> teacher(d, rng);
        for (auto& p : teacher.params())
            for (auto& v : p.values()) v += 0.1 * rng.normal();
        auto x = fixed({4, 2}, rng), eps = fixed({4, 2}, rng), c = fixed({4, 2}, rng);
        std::vector<double> t = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
        track("fm", grad_check(teacher, [&](auto& m) { return fm_loss(m, x, eps, std::span<const double>(t), c); }));

        StudentModel<double> student(d, rng);
        for (auto& p : student.params())
            for (auto& v : p.values()) v = 0.4 * rng.normal();
        auto frozen = student.clone();
        set_trainable(frozen, false);
        std::vector<Interval> iv;
        for (int i = 0; i < 4; ++i) iv.push_back(sample_interval(rng));
        track("isc", grad_check(student, [&](auto& m) { return isc_loss(m, x, iv, c, &frozen); }));
        track("boundary", grad_check(student, [&](auto& m) {
                  return boundary_loss(m, teacher, x, std::span<const double>(t), c, std::nullopt);
              }));

        auto net = make_feature_net<double>(2);
        track("reconstruction", grad_check(student, [&](auto& m) {
                  return reconstruction_loss(one_step_sample(m, eps, c), x, net);
              }));

        Discriminator<double> raw(2, DiscriminatorInput::raw, 6, rng);
        set_trainable(raw, false);
        track("gan_generator", grad_check(student, [&](auto& m) { return gan_generator_loss(raw, one_step_sample(m, eps, c)); }));
        set_trainable(raw, true);

        Discriminator<double> patch(16, DiscriminatorInput::patch_features, 6, rng);
        auto real = fixed({4, 16}, rng, 0.3), fake = fixed({4, 16}, rng, 0.3);
        // h = 1e-4 for this loss, see the decisions ledger
        track("gan_discriminator", grad_check(patch, [&](auto& m) { return gan_discriminator_loss(m, real, fake); }, 1e-4));
        track("gan_discriminator", grad_check(raw, [&](auto& m) { return gan_discriminator_loss(m, x, eps); }, 1e-4));
    }
    const double secs = seconds_since(t0);
    bool ok = secs < 60.0;
    std::string detail;
    for (const auto& [name, e] : worst) {
        ok = ok && e <= 1e-3;
        detail += name + " " + num(e) + ", ";
    }
    return {ok, detail + "(<= 1e-3, 100 trials each); " + num(secs) + " s"};
}

// ---------------------------------------------------------------- 3

Outcome vsd_fixed_point() {
    Rng rng(303);
    ModelDims d = tiny_dims();
    d.hidden = {16, 16};
    TeacherModel<float> teacher(d, rng);
    for (auto& p : teacher.params())
        for (auto& v : p.values()) v += static_cast<float>(0.05 * rng.normal());
    auto reg = make_regularizer(teacher);
    auto cond = gaussian_like<float>(64, 2, rng);
    std::size_t nonzero = 0;
    for (int i = 0; i < 100; ++i) {
        auto z_hat = gaussian_like<float>(64, 2, rng);
        for (float v : vsd_gradient(z_hat, teacher, reg, cond, VsdConfig{}, rng)) nonzero += v != 0.0f;
    }

    AdamW<float> opt(reg.params(), AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 50; ++i) {
        auto shifted = gaussian_like<float>(64, 2, rng);
        for (auto& v : shifted.values()) v += 2.0f;
        zero_grad(reg);
        backward(regularizer_loss(reg, shifted, cond, rng));
        opt.step(reg.params(), reg.param_names());
    }
    auto z_hat = gaussian_like<float>(64, 2, rng);
    double norm = 0.0;
    for (float v : vsd_gradient(z_hat, teacher, reg, cond, VsdConfig{}, rng)) norm += double(v) * v;
    norm = std::sqrt(norm);
    return {nonzero == 0 && norm > 0.0,
            std::to_string(nonzero) + " nonzero entries over 100 evaluations; norm after 50 updates " + num(norm)};
}

// ---------------------------------------------------------------- 4, 5, 6, 8 (two moons)

struct MoonsRun {
    ExperimentConfig cfg;
    double teacher_secs = 0.0, distill_secs = 0.0;
    double floor = 0.0, teacher_sw = 0.0, k1 = 0.0, k4 = 0.0;
};

// Mean over evaluation seeds; the floor is SW between the two held-out halves.
MoonsRun train_moons(std::uint64_t seed) {
    MoonsRun run;
    run.cfg = shipped("two_moons.conf", "two_moons_seed" + std::to_string(seed));
    run.cfg.seed = seed;
    run.teacher_secs = timed_stage(run.cfg, "teacher");
    run.distill_secs = timed_stage(run.cfg, "distill");

    const auto teacher = load_teacher_of(run.cfg);
    const auto student = load_student_of(run.cfg, artifact::student);
    const auto split = split_evaluation(evaluation_data(run.cfg), run.cfg.eval.samples);
    Rng proj(kProjectionSeed);
    run.floor = sliced_wasserstein(split.paired_x_h, split.reference, random_directions(2, run.cfg.eval.projections, proj));
    const auto seeds = seed_range(run.cfg.eval.seeds);
    auto rep = metric_stability([&](std::uint64_t s) { return evaluate_seed(run.cfg, split, {&teacher, &student, nullptr}, s); },
                                seeds);
    run.teacher_sw = rep.metrics.at("teacher.sw").mean;
    run.k1 = rep.metrics.at("student.sw").mean;
    run.k4 = rep.metrics.at("student_k4.sw").mean;
    return run;
}

std::vector<MoonsRun>& moons_runs() {
    static std::vector<MoonsRun> runs;
    if (runs.empty())
        for (std::uint64_t seed : {1, 2, 3}) {
            std::printf("  training two-moons teacher and student, seed %llu\n", static_cast<unsigned long long>(seed));
            std::fflush(stdout);
            runs.push_back(train_moons(seed));
        }
    return runs;
}

Outcome teacher_quality() {
    const auto& r = moons_runs().front();
    const double ratio = r.teacher_sw / r.floor;
    return {ratio <= 3.0 && r.teacher_secs <= 300.0,
            "teacher SW " + num(r.teacher_sw) + ", floor " + num(r.floor) + ", ratio " + num(ratio) + " (<= 3); " +
                num(r.teacher_secs) + " s (<= 300)"};
}

Outcome one_step_distillation() {
    const auto& r = moons_runs().front();
    const double ratio = r.k1 / r.teacher_sw;
    return {ratio <= 1.5 && r.distill_secs <= 600.0,
            "one-step SW " + num(r.k1) + ", teacher SW " + num(r.teacher_sw) + ", ratio " + num(ratio) + " (<= 1.5); " +
                num(r.distill_secs) + " s (<= 600)"};
}

Outcome step_saturation() {
    bool ok = true;
    std::string detail;
    for (const auto& r : moons_runs()) {
        const double gap = std::abs(r.k1 - r.k4) / r.k1;
        ok = ok && gap <= 0.2;
        detail += "seed " + std::to_string(r.cfg.seed) + ": k1 " + num(r.k1) + " k4 " + num(r.k4) + " rel " + num(gap) + "; ";
    }
    return {ok, detail + "(<= 0.2)"};
}

Outcome diversity_and_stability() {
    const auto cfg = moons_runs().front().cfg;
    timed_stage(cfg, "refine");
    const auto refined = load_student_of(cfg, artifact::refined);
    const auto eval = evaluation_data(cfg);
    const auto seeds = seed_range(20);

    std::vector<std::size_t> first{0};
    Rng crng(0);
    const auto cond_row = encode_batch(eval.lr_batch(first), 0.0, crng);
    const std::size_t n = 64;
    std::vector<float> cv;
    for (std::size_t i = 0; i < n; ++i) cv.insert(cv.end(), cond_row.values().begin(), cond_row.values().end());
    const Tensor<float> cond(Shape{n, cond_row.cols()}, std::move(cv));
    auto generate = [&](std::uint64_t s) {
        NoGradGuard no_grad;
        Rng rng(derive_seed(stage_seed(cfg, "eval"), s));
        return one_step_sample(refined, gaussian_like<float>(n, 2, rng), cond);
    };
    const auto div = seed_diversity(generate, std::span<const std::uint64_t>(seeds), mean_row_distance<float>);

    const auto split = split_evaluation(eval, cfg.eval.samples);
    auto rep = metric_stability([&](std::uint64_t s) { return evaluate_seed(cfg, split, {nullptr, nullptr, &refined}, s); },
                                std::span<const std::uint64_t>(seeds));
    const auto& sw = rep.metrics.at("refined.sw");
    const double rel = sw.std / sw.mean;
    return {div.mean_to_reference > 0.0 && rel <= 0.05,
            "diversity " + num(div.mean_to_reference) + " (> 0); refined SW " + num(sw.mean) + " +- " + num(sw.std) +
                ", relative std " + num(rel) + " (<= 0.05)"};
}

// ---------------------------------------------------------------- 7

Outcome refinement_direction() {
    auto cfg = shipped("tiny_patches.conf", "tiny_patches");
    std::printf("  running tiny-patches pipeline\n");
    std::fflush(stdout);
    for (const auto& s : pipeline_stages()) timed_stage(cfg, s);
    std::ifstream in(fs::path(cfg.output_dir) / artifact::metrics);
    std::map<std::string, double> mean;
    std::string line;
    while (std::getline(in, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) continue;
        if (line.compare(a + 1, b - a - 1, "mean") == 0) mean[line.substr(0, a)] = std::stod(line.substr(b + 1));
    }
    const double h1 = mean.at("student.hist_sw"), h2 = mean.at("refined.hist_sw");
    const double p1 = mean.at("student.psnr"), p2 = mean.at("refined.psnr");
    return {h2 < h1 && p1 - p2 <= 3.0, "histogram SW " + num(h1) + " -> " + num(h2) + " (must decrease); PSNR " + num(p1) +
                                           " -> " + num(p2) + " dB (drop <= 3)"};
}

// ---------------------------------------------------------------- 9

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
    auto a = shipped("smoke.conf", "smoke_a"), b = shipped("smoke.conf", "smoke_b");
    fs::remove_all(a.output_dir);
    fs::remove_all(b.output_dir);
    std::ostringstream sink;
    PipelineOptions opt;
    opt.log = &sink;
    run_pipeline(a, pipeline_stages(), opt);
    run_pipeline(b, pipeline_stages(), opt);
    std::size_t files = 0, same = 0;
    for (const auto& s : pipeline_stages())
        for (const auto& f : stage_outputs(s)) {
            ++files;
            const auto x = slurp(fs::path(a.output_dir) / f);
            same += !x.empty() && x == slurp(fs::path(b.output_dir) / f);
        }
    return {files == 9 && same == files, std::to_string(same) + " of " + std::to_string(files) + " artifacts bit-identical"};
}

// ---------------------------------------------------------------- 10

Outcome branch_accounting() {
    const auto data = generate_dataset(kTwoMoons, 64, 5);
    Rng rng(1010);
    ModelDims d;
    d.state_dim = 2;
    d.cond_dim = condition_dim(data.lr_dim());
    d.embed_dim = 4;
    d.hidden = {4};
    TeacherModel<float> teacher(d, rng);
    Stage1Config cfg;
    cfg.branch_probability = 0.6;
    cfg.iterations = 10000;
    cfg.batch_size = 1;
    cfg.seed = derive_seed(1, "distill");
    const auto res = train_student(teacher, data, cfg);
    const double frac = static_cast<double>(res.split_steps) / 10000.0;
    return {frac >= 0.58 && frac <= 0.62, "splitting branch in " + std::to_string(res.split_steps) +
                                              " of 10000 steps, fraction " + num(frac) + " (in [0.58, 0.62])"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"ISC identity", isc_identity},
        {"gradient fidelity", gradient_fidelity},
        {"VSD fixed point", vsd_fixed_point},
        {"teacher quality", teacher_quality},
        {"one-step distillation", one_step_distillation},
        {"step saturation", step_saturation},
        {"stage-2 refinement direction", refinement_direction},
        {"diversity and stability", diversity_and_stability},
        {"determinism", determinism},
        {"branch accounting", branch_accounting},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s C%d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
