// Command-line front end: one subcommand per pipeline stage plus sampling
// and interval-splitting diagnostics.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "smf/analytic.hpp"
#include "smf/pipeline.hpp"

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "key = value config file (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "master seed, overrides the config's 'seed'");
    cmd->add_flag("--dry-run", c.dry_run, "validate the config and print the plan; write nothing");
}

smf::ExperimentConfig resolve(const Common& c) {
    auto cfg = c.config_path.empty() ? smf::ExperimentConfig{} : smf::load_config(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    smf::validate(cfg);
    return cfg;
}

int run_stage(const Common& c, const std::string& stage, bool force) {
    const auto cfg = resolve(c);
    smf::PipelineOptions opt;
    opt.force = force;
    opt.dry_run = c.dry_run;
    if (c.dry_run) std::cout << "config fingerprint " << smf::hex64(smf::stage_fingerprint(cfg, stage)) << "\n";
    smf::run_pipeline(cfg, {stage}, opt);
    return 0;
}

int run_sample(const Common& c, const std::string& model, int steps, std::size_t count, const std::string& out) {
    const auto cfg = resolve(c);
    const std::string file = model == "teacher" ? smf::artifact::teacher
                             : model == "student" ? smf::artifact::student
                                                  : smf::artifact::refined;
    const auto ckpt = (std::filesystem::path(cfg.output_dir) / file).string();
    const auto target = out.empty() ? (std::filesystem::path(cfg.output_dir) / ("samples_" + model + ".csv")).string() : out;
    if (c.dry_run) {
        std::cout << "dry run: would draw " << count << " samples from " << ckpt << " into " << target << "\n";
        return 0;
    }
    const auto eval = smf::evaluation_data(cfg);
    std::vector<std::size_t> idx(std::min(count, eval.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    smf::Rng rng(smf::derive_seed(smf::stage_seed(cfg, "sample"), model));
    auto cond = smf::encode_batch(eval.lr_batch(idx), 0.0, rng);
    auto eps = smf::gaussian_like<float>(idx.size(), eval.hr_dim(), rng);
    smf::Tensor<float> x;
    {
        smf::NoGradGuard no_grad;
        if (model == "teacher") {
            auto sc = cfg.sampler;
            if (steps > 0) sc.num_steps = steps;
            x = smf::teacher_sample(smf::load_teacher(ckpt), eps, cond, sc);
        } else {
            x = smf::multi_step_sample(smf::load_student(ckpt), eps, cond, steps > 0 ? steps : 1);
        }
    }
    smf::CsvTable t;
    for (std::size_t k = 0; k < x.cols(); ++k) t.header.push_back("x" + std::to_string(k));
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::vector<smf::CsvCell> row;
        for (std::size_t k = 0; k < x.cols(); ++k) row.emplace_back(static_cast<double>(x(r, k)));
        t.rows.push_back(std::move(row));
    }
    smf::emit_report(t, target);
    std::cout << "wrote " << x.rows() << " samples to " << target << "\n";
    return 0;
}

int run_diagnose(const Common& c, int trials, std::size_t steps) {
    const auto cfg = resolve(c);
    if (c.dry_run) {
        std::cout << "dry run: would scan " << trials << " intervals and simulate " << steps << " branch draws\n";
        return 0;
    }
    namespace an = smf::analytic;
    smf::Rng rng(smf::stage_seed(cfg, "diagnose-isc"));
    auto scan = [&](const auto& f) {
        return smf::isc_residual_scan(
            [&](const smf::Tensor<double>& z, std::span<const double> r, std::span<const double> t) {
                return an::evaluate_u<double>(f, z, r, t);
            },
            trials, 1, rng, cfg.distill.intervals);
    };
    std::cout << "interval splitting residual, max over " << trials << " random intervals\n";
    std::cout << "  constant field v = 1           " << smf::format_number(scan(an::ConstantField{})) << "\n";
    std::cout << "  linear field v = 2 tau         " << smf::format_number(scan(an::LinearTimeField{})) << "\n";
    std::cout << "  exponential field v = 0.7 z    " << smf::format_number(scan(an::ExponentialField{})) << "\n";
    std::cout << "  wrong field u = t^2            " << smf::format_number(scan(an::WrongField{}))
              << "  (at r=0, s=0.5, t=1: " << smf::format_number(smf::isc_residual_at(an::WrongField{}, 0.0, 0.5, 1.0)) << ")\n";

    for (const char* file : {smf::artifact::student, smf::artifact::refined}) {
        const auto path = std::filesystem::path(cfg.output_dir) / file;
        if (!std::filesystem::exists(path)) continue;
        const auto student = smf::load_student(path.string());
        const auto eval = smf::evaluation_data(cfg);
        std::vector<std::size_t> first{0};
        smf::Rng crng(0);
        const auto cond = smf::encode_batch(eval.lr_batch(first), 0.0, crng);
        const double res = smf::isc_residual_scan(smf::student_field(student, cond), trials, student.dims().state_dim, rng,
                                                  cfg.distill.intervals);
        std::cout << "  " << path.string() << "  " << smf::format_number(res) << "\n";
    }

    const double p = cfg.distill.branch_probability;
    smf::Rng qrng(smf::derive_seed(smf::stage_seed(cfg, "diagnose-isc"), "branch"));
    std::size_t below = 0;
    for (std::size_t i = 0; i < steps; ++i)
        if (qrng.uniform() < p) ++below;
    const double frac_below = static_cast<double>(below) / static_cast<double>(steps);
    const bool literal = cfg.distill.branch_rule == smf::BranchRule::split_below_p;
    std::cout << "\nbranch accounting over " << steps << " steps with p = " << smf::format_number(p) << "\n";
    std::cout << "  q < p in " << below << " steps (" << smf::format_number(frac_below) << ")\n";
    std::cout << "  rule split_below_p   : splitting " << smf::format_number(frac_below) << ", boundary "
              << smf::format_number(1.0 - frac_below) << (literal ? "   <- active" : "") << "\n";
    std::cout << "  rule boundary_below_p: splitting " << smf::format_number(1.0 - frac_below) << ", boundary "
              << smf::format_number(frac_below) << (literal ? "" : "   <- active") << "\n";
    std::cout << "\nnote: the training pseudocode runs the splitting loss when q < p, while the\n"
                 "      text describes p as the probability of the boundary branch. The two\n"
                 "      readings swap the branch frequencies above. The default follows the\n"
                 "      pseudocode; set distill.branch_rule = boundary_below_p for the other.\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SplitMeanFlow desk-scale lab"};
    app.require_subcommand(1);

    Common common;
    bool force = false;
    const std::pair<const char*, const char*> stages[] = {{"train-teacher", "teacher"},
                                                          {"distill", "distill"},
                                                          {"refine", "refine"},
                                                          {"eval", "eval"}};
    for (const auto& [name, stage] : stages) {
        auto* cmd = app.add_subcommand(name, std::string("run the ") + stage + " stage");
        add_common(cmd, common);
        cmd->add_flag("--force", force, "rerun even when outputs are current");
    }

    std::string model = "refined", out;
    int steps = 0;
    std::size_t count = 512;
    auto* sample = app.add_subcommand("sample", "draw samples from a trained model into a CSV");
    add_common(sample, common);
    sample->add_option("--model", model, "teacher, student or refined")->check(CLI::IsMember({"teacher", "student", "refined"}));
    sample->add_option("--steps", steps, "sampling steps (teacher ODE steps or student jumps)");
    sample->add_option("--count", count, "number of samples");
    sample->add_option("--out", out, "CSV path (default: <output_dir>/samples_<model>.csv)");

    int trials = 1000;
    std::size_t branch_steps = 10000;
    auto* diag = app.add_subcommand("diagnose-isc", "interval-splitting residuals and branch accounting");
    add_common(diag, common);
    diag->add_option("--trials", trials, "random intervals per scan");
    diag->add_option("--steps", branch_steps, "simulated training steps for branch accounting");

    CLI11_PARSE(app, argc, argv);
    try {
        for (const auto& [name, stage] : stages)
            if (app.got_subcommand(name)) return run_stage(common, stage, force);
        if (app.got_subcommand("sample")) return run_sample(common, model, steps, count, out);
        return run_diagnose(common, trials, branch_steps);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
