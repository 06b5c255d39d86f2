#pragma once

// Experiment configuration as a flat `key = value` file. Lines starting with
// '#' are comments. Every key must be known; values are parsed strictly.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "data.hpp"
#include "flow.hpp"
#include "isc.hpp"
#include "random.hpp"
#include "metrics.hpp"
#include "refine.hpp"

namespace smf {

struct EvalConfig {
    std::size_t seeds = 20;
    std::size_t samples = 512;  // generated samples per seed
    int projections = kDefaultProjections;
};

struct ExperimentConfig {
    std::string dataset = kTwoMoons;
    std::size_t train_size = 8192;
    std::size_t eval_size = 2048;
    DegradationParams degradation;
    std::vector<std::size_t> hidden = {128, 128, 128};
    std::size_t embed_dim = 16;
    TeacherTrainConfig teacher;
    Stage1Config distill;
    Stage2Config refine;
    SamplerConfig sampler;
    EvalConfig eval;
    std::uint64_t seed = 0;
    std::string output_dir = "smf_out";
    bool plots = false;

    ExperimentConfig() {
        teacher.iterations = 6000;
        distill.iterations = 10000;
        distill.optimizer.learning_rate = 3e-4;
    }
};

namespace detail {

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw config_error("config: key '" + key + "' expects " + expected + ", got '" + value + "'");
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Shortest %g form that reads back to the same double.
inline std::string fmt_double(double v) {
    char buf[32];
    for (int digits = 6; digits <= 17; ++digits) {
        std::snprintf(buf, sizeof buf, "%.*g", digits, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    bad_value(key, v, "a number");
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    if (!v.empty() && v[0] != '-') {
        try {
            std::size_t used = 0;
            const auto u = std::stoull(v, &used, 0);
            if (used == v.size()) return u;
        } catch (const std::exception&) {
        }
    }
    bad_value(key, v, "a nonnegative integer");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> parts;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) parts.push_back(trim(item));
    return parts;
}

}  // namespace detail

/// One config key: which pipeline stage it belongs to plus exact text
/// conversions in both directions.
struct ConfigField {
    std::string key;
    std::string stage;  // data, model, teacher, distill, refine, sampler, eval, run
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

template <class Ref>
ConfigField f64(std::string key, std::string stage, Ref ref) {
    return {key, stage, [ref](const ExperimentConfig& c) { return fmt_double(ref(const_cast<ExperimentConfig&>(c))); },
            [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

template <class Ref>
ConfigField uint(std::string key, std::string stage, Ref ref) {
    return {key, stage, [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); },
            [ref, key](ExperimentConfig& c, const std::string& v) {
                using U = std::remove_reference_t<decltype(ref(c))>;
                const auto u = parse_uint(key, v);
                if (u > static_cast<std::uint64_t>(std::numeric_limits<U>::max())) bad_value(key, v, "a smaller integer");
                ref(c) = static_cast<U>(u);
            }};
}

/// Optional number; "none" means absent.
template <class Ref>
ConfigField opt_f64(std::string key, std::string stage, Ref ref) {
    return {key, stage,
            [ref](const ExperimentConfig& c) {
                const auto& o = ref(const_cast<ExperimentConfig&>(c));
                return o ? fmt_double(*o) : std::string("none");
            },
            [ref, key](ExperimentConfig& c, const std::string& v) {
                if (v == "none") ref(c).reset();
                else ref(c) = parse_double(key, v);
            }};
}

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    using namespace detail;
    static const std::vector<ConfigField> fields = {
        {"dataset", "data", [](const C& c) { return c.dataset; },
         [](C& c, const std::string& v) {
             if (v != kTwoMoons && v != kGaussianMixture && v != kTinyPatches) bad_value("dataset", v, "a known dataset name");
             c.dataset = v;
         }},
        uint("data.train_size", "data", [](C& c) -> auto& { return c.train_size; }),
        uint("data.eval_size", "data", [](C& c) -> auto& { return c.eval_size; }),
        uint("data.downsample", "data", [](C& c) -> auto& { return c.degradation.downsample_factor; }),
        f64("data.noise_std", "data", [](C& c) -> auto& { return c.degradation.noise_std; }),
        {"data.quantize_levels", "data",
         [](const C& c) { return c.degradation.quantize_levels ? std::to_string(*c.degradation.quantize_levels) : "none"; },
         [](C& c, const std::string& v) {
             if (v == "none") {
                 c.degradation.quantize_levels.reset();
                 return;
             }
             const auto u = parse_uint("data.quantize_levels", v);
             if (u < 2 || u > 65536) bad_value("data.quantize_levels", v, "none or an integer in [2, 65536]");
             c.degradation.quantize_levels = static_cast<int>(u);
         }},
        {"model.hidden", "model",
         [](const C& c) {
             std::string s;
             for (std::size_t i = 0; i < c.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.hidden[i]);
             return s;
         },
         [](C& c, const std::string& v) {
             std::vector<std::size_t> h;
             for (const auto& p : split_list(v)) {
                 const auto u = parse_uint("model.hidden", p);
                 if (u == 0) bad_value("model.hidden", v, "positive layer widths");
                 h.push_back(static_cast<std::size_t>(u));
             }
             if (h.empty()) bad_value("model.hidden", v, "at least one width");
             c.hidden = std::move(h);
         }},
        uint("model.embed_dim", "model", [](C& c) -> auto& { return c.embed_dim; }),
        uint("teacher.iterations", "teacher", [](C& c) -> auto& { return c.teacher.iterations; }),
        uint("teacher.batch_size", "teacher", [](C& c) -> auto& { return c.teacher.batch_size; }),
        f64("teacher.lr", "teacher", [](C& c) -> auto& { return c.teacher.optimizer.learning_rate; }),
        f64("teacher.weight_decay", "teacher", [](C& c) -> auto& { return c.teacher.optimizer.weight_decay; }),
        f64("teacher.cond_dropout", "teacher", [](C& c) -> auto& { return c.teacher.cond_dropout; }),
        uint("distill.iterations", "distill", [](C& c) -> auto& { return c.distill.iterations; }),
        uint("distill.batch_size", "distill", [](C& c) -> auto& { return c.distill.batch_size; }),
        f64("distill.lr", "distill", [](C& c) -> auto& { return c.distill.optimizer.learning_rate; }),
        f64("distill.weight_decay", "distill", [](C& c) -> auto& { return c.distill.optimizer.weight_decay; }),
        f64("distill.branch_probability", "distill", [](C& c) -> auto& { return c.distill.branch_probability; }),
        {"distill.branch_rule", "distill",
         [](const C& c) { return std::string(c.distill.branch_rule == BranchRule::split_below_p ? "split_below_p" : "boundary_below_p"); },
         [](C& c, const std::string& v) {
             if (v == "split_below_p") c.distill.branch_rule = BranchRule::split_below_p;
             else if (v == "boundary_below_p") c.distill.branch_rule = BranchRule::boundary_below_p;
             else bad_value("distill.branch_rule", v, "split_below_p or boundary_below_p");
         }},
        opt_f64("distill.boundary_guidance", "distill", [](C& c) -> auto& { return c.distill.guidance_scale; }),
        f64("distill.full_interval_prob", "distill", [](C& c) -> auto& { return c.distill.intervals.full_interval_prob; }),
        f64("distill.cond_dropout", "distill", [](C& c) -> auto& { return c.distill.cond_dropout; }),
        uint("refine.iterations", "refine", [](C& c) -> auto& { return c.refine.iterations; }),
        uint("refine.batch_size", "refine", [](C& c) -> auto& { return c.refine.batch_size; }),
        f64("refine.student_lr", "refine", [](C& c) -> auto& { return c.refine.student_optimizer.learning_rate; }),
        f64("refine.regularizer_lr", "refine", [](C& c) -> auto& { return c.refine.regularizer_optimizer.learning_rate; }),
        f64("refine.discriminator_lr", "refine", [](C& c) -> auto& { return c.refine.discriminator_optimizer.learning_rate; }),
        f64("refine.lambda_isc", "refine", [](C& c) -> auto& { return c.refine.weights.isc; }),
        f64("refine.lambda_rec", "refine", [](C& c) -> auto& { return c.refine.weights.reconstruction; }),
        f64("refine.lambda_vsd", "refine", [](C& c) -> auto& { return c.refine.weights.vsd; }),
        f64("refine.lambda_adv", "refine", [](C& c) -> auto& { return c.refine.weights.adversarial; }),
        uint("refine.regularizer_updates", "refine", [](C& c) -> auto& { return c.refine.regularizer_updates; }),
        uint("refine.discriminator_updates", "refine", [](C& c) -> auto& { return c.refine.discriminator_updates; }),
        uint("refine.discriminator_hidden", "refine", [](C& c) -> auto& { return c.refine.discriminator_hidden; }),
        f64("refine.vsd_t_min", "refine", [](C& c) -> auto& { return c.refine.vsd.t_min; }),
        f64("refine.vsd_t_max", "refine", [](C& c) -> auto& { return c.refine.vsd.t_max; }),
        opt_f64("refine.vsd_guidance", "refine", [](C& c) -> auto& { return c.refine.vsd.teacher_guidance; }),
        {"refine.omega", "refine",
         [](const C& c) {
             if (c.refine.vsd.schedule.table.empty()) return std::string("1");
             std::string s;
             for (std::size_t i = 0; i < c.refine.vsd.schedule.table.size(); ++i)
                 s += (i ? "," : "") + fmt_double(c.refine.vsd.schedule.table[i]);
             return s;
         },
         [](C& c, const std::string& v) {
             std::vector<double> t;
             for (const auto& p : split_list(v)) {
                 const double x = parse_double("refine.omega", p);
                 if (!(x >= 0.0)) bad_value("refine.omega", v, "nonnegative weights");
                 t.push_back(x);
             }
             if (t.empty()) bad_value("refine.omega", v, "at least one weight");
             if (t.size() == 1 && t[0] == 1.0) t.clear();
             c.refine.vsd.schedule.table = std::move(t);
         }},
        f64("refine.branch_probability", "refine", [](C& c) -> auto& { return c.refine.branch_probability; }),
        f64("refine.full_interval_prob", "refine", [](C& c) -> auto& { return c.refine.intervals.full_interval_prob; }),
        uint("sampler.steps", "sampler", [](C& c) -> auto& { return c.sampler.num_steps; }),
        {"sampler.scheme", "sampler",
         [](const C& c) { return std::string(c.sampler.scheme == Scheme::euler ? "euler" : "midpoint"); },
         [](C& c, const std::string& v) {
             if (v == "euler") c.sampler.scheme = Scheme::euler;
             else if (v == "midpoint") c.sampler.scheme = Scheme::midpoint;
             else bad_value("sampler.scheme", v, "euler or midpoint");
         }},
        opt_f64("sampler.guidance", "sampler", [](C& c) -> auto& { return c.sampler.guidance_scale; }),
        uint("eval.seeds", "eval", [](C& c) -> auto& { return c.eval.seeds; }),
        uint("eval.samples", "eval", [](C& c) -> auto& { return c.eval.samples; }),
        uint("eval.projections", "eval", [](C& c) -> auto& { return c.eval.projections; }),
        uint("seed", "run", [](C& c) -> auto& { return c.seed; }),
        {"output_dir", "run", [](const C& c) { return c.output_dir; },
         [](C& c, const std::string& v) {
             if (v.empty()) bad_value("output_dir", v, "a path");
             c.output_dir = v;
         }},
        {"plots", "run", [](const C& c) { return std::string(c.plots ? "true" : "false"); },
         [](C& c, const std::string& v) {
             if (v == "true") c.plots = true;
             else if (v == "false") c.plots = false;
             else bad_value("plots", v, "true or false");
         }},
    };
    return fields;
}

/// Range checks that span several keys or need the dataset.
inline void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& m) { throw config_error("config: " + m); };
    if (c.train_size == 0 || c.eval_size < 2) fail("data.train_size must be > 0 and data.eval_size >= 2");
    if (c.embed_dim == 0 || c.embed_dim % 2) fail("model.embed_dim must be even and positive");
    if (c.teacher.batch_size == 0 || c.distill.batch_size == 0 || c.refine.batch_size == 0) fail("batch sizes must be positive");
    for (double lr : {c.teacher.optimizer.learning_rate, c.distill.optimizer.learning_rate,
                      c.refine.student_optimizer.learning_rate, c.refine.regularizer_optimizer.learning_rate,
                      c.refine.discriminator_optimizer.learning_rate})
        if (!(lr > 0.0)) fail("learning rates must be positive");
    for (double p : {c.teacher.cond_dropout, c.distill.cond_dropout, c.distill.branch_probability,
                     c.distill.intervals.full_interval_prob, c.refine.branch_probability, c.refine.intervals.full_interval_prob})
        if (!(p >= 0.0 && p <= 1.0)) fail("probabilities must lie in [0, 1]");
    if (!(c.refine.vsd.t_min >= 0.0 && c.refine.vsd.t_min <= c.refine.vsd.t_max && c.refine.vsd.t_max <= 1.0))
        fail("need 0 <= refine.vsd_t_min <= refine.vsd_t_max <= 1");
    c.refine.weights.validate();
    if (c.sampler.num_steps < 1) fail("sampler.steps must be >= 1");
    if (c.eval.seeds < 2) fail("eval.seeds must be >= 2");
    if (c.eval.samples == 0 || c.eval.projections < 1) fail("eval.samples and eval.projections must be positive");
    if (c.degradation.downsample_factor == 0) fail("data.downsample must be positive");
    if (c.dataset == kTinyPatches && kPatchSide % c.degradation.downsample_factor)
        fail("data.downsample must divide the patch side " + std::to_string(kPatchSide));
}

/// Applies `key = value` lines on top of `base`.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
    std::set<std::string> seen;
    std::stringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        const ConfigField* field = nullptr;
        for (const auto& f : config_fields())
            if (f.key == key) field = &f;
        if (!field) throw config_error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw config_error("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        field->set(base, value);
    }
    validate(base);
    return base;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Canonical text: every key in table order.
inline std::string serialize_config(const ExperimentConfig& c) {
    std::string s;
    for (const auto& f : config_fields()) s += f.key + " = " + f.get(c) + "\n";
    return s;
}

inline const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> s = {"teacher", "distill", "refine", "eval"};
    return s;
}

/// Fingerprint of everything that influences `stage` and the stages before
/// it. The master seed is included; output_dir and plots are not.
inline std::uint64_t stage_fingerprint(const ExperimentConfig& c, const std::string& stage) {
    std::set<std::string> groups = {"data", "model", "teacher"};
    if (stage == "distill" || stage == "refine" || stage == "eval") groups.insert("distill");
    if (stage == "refine" || stage == "eval") groups.insert("refine");
    if (stage == "eval") groups.insert({"sampler", "eval"});
    if (stage != "teacher" && !groups.count("distill")) throw std::invalid_argument("unknown stage '" + stage + "'");
    std::string s = "seed=" + std::to_string(c.seed) + "\n";
    for (const auto& f : config_fields())
        if (groups.count(f.stage)) s += f.key + "=" + f.get(c) + "\n";
    return fnv1a(s);
}

inline std::uint64_t config_fingerprint(const ExperimentConfig& c) { return stage_fingerprint(c, "eval"); }

// ---------------------------------------------------------------- stage settings

inline std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage) { return derive_seed(c.seed, stage); }

inline ModelDims model_dims(const ExperimentConfig& c, const ToyDataset& data) {
    ModelDims d;
    d.state_dim = data.hr_dim();
    d.cond_dim = condition_dim(data.lr_dim());
    d.embed_dim = c.embed_dim;
    d.hidden = c.hidden;
    return d;
}

inline ToyDataset training_data(const ExperimentConfig& c) {
    return generate_dataset(c.dataset, c.train_size, stage_seed(c, "data.train"), c.degradation);
}

inline ToyDataset evaluation_data(const ExperimentConfig& c) {
    return generate_dataset(c.dataset, c.eval_size, stage_seed(c, "data.eval"), c.degradation);
}

inline TeacherTrainConfig teacher_settings(const ExperimentConfig& c, const ToyDataset& data) {
    auto t = c.teacher;
    t.dims = model_dims(c, data);
    t.seed = stage_seed(c, "teacher");
    return t;
}

inline Stage1Config distill_settings(const ExperimentConfig& c) {
    auto s = c.distill;
    s.seed = stage_seed(c, "distill");
    return s;
}

inline Stage2Config refine_settings(const ExperimentConfig& c) {
    auto s = c.refine;
    s.branch_rule = c.distill.branch_rule;
    s.boundary_guidance = c.distill.guidance_scale;
    s.seed = stage_seed(c, "refine");
    return s;
}

}  // namespace smf
