#pragma once

// Stage orchestration: teacher -> distill -> refine -> eval, with on-disk
// artifacts in the configured output directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "metrics.hpp"
#include "report.hpp"

namespace smf {

struct pipeline_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace artifact {
inline constexpr const char* teacher = "teacher.smf";
inline constexpr const char* student = "student.smf";
inline constexpr const char* refined = "refined.smf";
inline constexpr const char* regularizer = "regularizer.smf";
inline constexpr const char* discriminator = "discriminator.smf";
inline constexpr const char* teacher_loss = "teacher_loss.csv";
inline constexpr const char* distill_loss = "distill_loss.csv";
inline constexpr const char* refine_loss = "refine_loss.csv";
inline constexpr const char* metrics = "metrics.csv";
}  // namespace artifact

/// Files each stage writes (stamp files excluded).
inline std::vector<std::string> stage_outputs(const std::string& stage) {
    using namespace artifact;
    if (stage == "teacher") return {teacher, teacher_loss};
    if (stage == "distill") return {student, distill_loss};
    if (stage == "refine") return {refined, regularizer, discriminator, refine_loss};
    if (stage == "eval") return {metrics};
    throw pipeline_error("unknown stage '" + stage + "'");
}

struct PipelineOptions {
    bool force = false;    // rerun stages whose outputs are current
    bool dry_run = false;  // validate and print the plan only
    std::ostream* log = &std::cout;
};

struct PipelineResult {
    std::vector<std::string> ran;
    std::vector<std::string> skipped;
};

// ---------------------------------------------------------------- evaluation

/// Condition rows come from the first half of the evaluation set; the second
/// half is the held-out reference distribution.
struct EvalSplit {
    Tensor<float> cond_x_l;   // observations to condition on
    Tensor<float> paired_x_h; // their ground truth
    Tensor<float> reference;  // independent held-out x_h
};

inline EvalSplit split_evaluation(const ToyDataset& eval, std::size_t samples) {
    const std::size_t half = eval.size() / 2;
    const std::size_t m = std::min(samples, half);
    std::vector<std::size_t> a(m), b(m);
    std::iota(a.begin(), a.end(), std::size_t{0});
    std::iota(b.begin(), b.end(), half);
    return {eval.lr_batch(a), eval.hr_batch(a), eval.hr_batch(b)};
}

struct EvalModels {
    const TeacherModel<float>* teacher = nullptr;
    const StudentModel<float>* student = nullptr;
    const StudentModel<float>* refined = nullptr;
};

/// Metrics for one evaluation seed. 2D tasks: sliced Wasserstein to the
/// reference set. Patch tasks: PSNR and feature distance to the paired ground
/// truth and sliced Wasserstein of gradient histograms to the reference set.
inline std::map<std::string, double> evaluate_seed(const ExperimentConfig& cfg, const EvalSplit& split, const EvalModels& models,
                                                   std::uint64_t seed) {
    NoGradGuard no_grad;
    Rng rng(derive_seed(stage_seed(cfg, "eval"), seed));
    const std::size_t n = split.cond_x_l.rows(), d = split.paired_x_h.cols();
    auto cond = encode_batch(split.cond_x_l, 0.0, rng);
    auto eps = gaussian_like<float>(n, d, rng);
    const bool patches = cfg.dataset == kTinyPatches;
    Rng proj_rng(kProjectionSeed);
    const auto dirs = random_directions(patches ? kGradientBins : d, cfg.eval.projections, proj_rng);
    const auto ref_hist = patches ? gradient_histograms(split.reference) : Tensor<double>();
    const auto feature_net = patches ? make_feature_net<float>(d) : Mlp<float>();

    std::map<std::string, double> out;
    auto score = [&](const std::string& name, const Tensor<float>& x) {
        if (patches) {
            out[name + ".psnr"] = mean_psnr(x, split.paired_x_h);
            out[name + ".feature_distance"] = feature_distance(x, split.paired_x_h, feature_net);
            out[name + ".hist_sw"] = sliced_wasserstein(gradient_histograms(x), ref_hist, dirs);
        } else {
            out[name + ".sw"] = sliced_wasserstein(x, split.reference, dirs);
        }
    };
    if (models.teacher) score("teacher", teacher_sample(*models.teacher, eps, cond, cfg.sampler));
    if (models.student) {
        score("student", one_step_sample(*models.student, eps, cond));
        if (!patches) {
            score("student_k2", multi_step_sample(*models.student, eps, cond, 2));
            score("student_k4", multi_step_sample(*models.student, eps, cond, 4));
        }
    }
    if (models.refined) score("refined", one_step_sample(*models.refined, eps, cond));
    return out;
}

inline MetricReport evaluate_models(const ExperimentConfig& cfg, const ToyDataset& eval, const EvalModels& models) {
    const auto split = split_evaluation(eval, cfg.eval.samples);
    const auto seeds = seed_range(cfg.eval.seeds);
    auto rep = metric_stability([&](std::uint64_t s) { return evaluate_seed(cfg, split, models, s); }, seeds);
    rep.samples_per_seed = split.cond_x_l.rows();
    rep.config_fingerprint = stage_fingerprint(cfg, "eval");
    return rep;
}

// ---------------------------------------------------------------- stages

namespace detail {

inline std::filesystem::path out_path(const ExperimentConfig& c, const std::string& file) {
    return std::filesystem::path(c.output_dir) / file;
}

inline std::filesystem::path stamp_path(const ExperimentConfig& c, const std::string& stage) {
    return out_path(c, stage + ".stamp");
}

inline bool stage_current(const ExperimentConfig& c, const std::string& stage) {
    for (const auto& f : stage_outputs(stage))
        if (!std::filesystem::exists(out_path(c, f))) return false;
    std::ifstream in(stamp_path(c, stage));
    std::string text;
    return in && std::getline(in, text) && text == hex64(stage_fingerprint(c, stage));
}

inline void write_stamp(const ExperimentConfig& c, const std::string& stage) {
    write_text(stamp_path(c, stage).string(), hex64(stage_fingerprint(c, stage)) + "\n");
}

inline void write_losses(const ExperimentConfig& c, const std::vector<LossRecord>& losses, const std::string& csv,
                         const std::string& title) {
    emit_report(loss_table(losses), out_path(c, csv).string());
    if (c.plots) {
        auto svg = csv.substr(0, csv.size() - 4) + ".svg";
        write_text(out_path(c, svg).string(), render_loss_svg(losses, title));
    }
}

/// Loads a checkpoint that an earlier stage must have produced under the
/// current config.
template <class Load>
auto require_input(const ExperimentConfig& c, const std::string& file, const std::string& producer, Load&& load) {
    const auto path = out_path(c, file);
    if (!std::filesystem::exists(path))
        throw pipeline_error("missing " + path.string() + ": run stage '" + producer + "' first");
    CheckpointMeta meta;
    auto model = load(path.string(), &meta);
    if (meta.fingerprint != stage_fingerprint(c, producer))
        throw pipeline_error(path.string() + " was produced by stage '" + producer +
                             "' under a different config; rerun that stage");
    return model;
}

inline TeacherModel<float> input_teacher(const ExperimentConfig& c) {
    return require_input(c, artifact::teacher, "teacher",
                         [](const std::string& p, CheckpointMeta* m) { return load_teacher(p, std::nullopt, m); });
}

inline StudentModel<float> input_student(const ExperimentConfig& c, const char* file, const std::string& producer) {
    return require_input(c, file, producer,
                         [](const std::string& p, CheckpointMeta* m) { return load_student(p, std::nullopt, m); });
}

}  // namespace detail

inline void run_teacher_stage(const ExperimentConfig& c, std::ostream& log) {
    const auto data = training_data(c);
    const auto settings = teacher_settings(c, data);
    log << "teacher: " << settings.iterations << " iterations on " << data.size() << " samples of " << c.dataset << "\n";
    auto res = train_teacher(data, settings);
    const auto fp = stage_fingerprint(c, "teacher");
    save_model(res.model, "teacher", settings.iterations, fp, detail::out_path(c, artifact::teacher).string());
    detail::write_losses(c, res.losses, artifact::teacher_loss, "teacher flow matching");
}

inline void run_distill_stage(const ExperimentConfig& c, std::ostream& log) {
    const auto teacher = detail::input_teacher(c);
    const auto data = training_data(c);
    const auto settings = distill_settings(c);
    log << "distill: " << settings.iterations << " iterations, p = " << settings.branch_probability << "\n";
    auto res = train_student(teacher, data, settings);
    log << "distill: splitting branch taken in " << res.split_steps << " of " << settings.iterations << " steps\n";
    save_model(res.student, settings.iterations, stage_fingerprint(c, "distill"), detail::out_path(c, artifact::student).string());
    detail::write_losses(c, res.losses, artifact::distill_loss, "stage 1 (interval splitting)");
}

inline void run_refine_stage(const ExperimentConfig& c, std::ostream& log) {
    const auto teacher = detail::input_teacher(c);
    const auto student = detail::input_student(c, artifact::student, "distill");
    const auto data = training_data(c);
    const auto settings = refine_settings(c);
    log << "refine: " << settings.iterations << " iterations\n";
    auto res = train_stage2(student, teacher, data, settings);
    const auto fp = stage_fingerprint(c, "refine");
    const auto it = settings.iterations;
    save_model(res.state.student, it, fp, detail::out_path(c, artifact::refined).string());
    save_model(res.state.regularizer, "regularizer", it, fp, detail::out_path(c, artifact::regularizer).string());
    save_model(res.state.discriminator, it, fp, detail::out_path(c, artifact::discriminator).string());
    detail::write_losses(c, res.losses, artifact::refine_loss, "stage 2 (refinement)");
}

inline void run_eval_stage(const ExperimentConfig& c, std::ostream& log) {
    const auto teacher = detail::input_teacher(c);
    const auto student = detail::input_student(c, artifact::student, "distill");
    const auto refined = detail::input_student(c, artifact::refined, "refine");
    const auto eval = evaluation_data(c);
    log << "eval: " << c.eval.seeds << " seeds\n";
    const auto rep = evaluate_models(c, eval, {&teacher, &student, &refined});
    emit_report(metric_table(rep), detail::out_path(c, artifact::metrics).string());
    for (const auto& [name, m] : rep.metrics) log << "  " << name << " = " << format_number(m.mean) << " +- " << format_number(m.std) << "\n";
}

/// Runs the requested stages in pipeline order. A stage whose outputs exist
/// with a matching config fingerprint is skipped unless `force` is set.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& stages,
                                   const PipelineOptions& opt = {}) {
    validate(cfg);
    std::set<std::string> wanted;
    for (const auto& s : stages) {
        stage_outputs(s);  // rejects unknown names
        wanted.insert(s);
    }
    std::ostream& log = *opt.log;
    PipelineResult res;
    if (opt.dry_run) {
        for (const auto& s : pipeline_stages())
            if (wanted.count(s)) log << "dry run: would run stage '" << s << "' into " << cfg.output_dir << "\n";
        return res;
    }
    if (wanted.empty()) return res;
    std::filesystem::create_directories(cfg.output_dir);
    for (const auto& s : pipeline_stages()) {
        if (!wanted.count(s)) continue;
        if (!opt.force && detail::stage_current(cfg, s)) {
            log << s << ": outputs are current, skipping\n";
            res.skipped.push_back(s);
            continue;
        }
        if (s == "teacher") run_teacher_stage(cfg, log);
        else if (s == "distill") run_distill_stage(cfg, log);
        else if (s == "refine") run_refine_stage(cfg, log);
        else run_eval_stage(cfg, log);
        detail::write_stamp(cfg, s);
        res.ran.push_back(s);
    }
    return res;
}

}  // namespace smf
