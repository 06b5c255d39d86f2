#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <vector>

#include "smf/checkpoint.hpp"
#include "smf/config.hpp"
#include "smf/report.hpp"

using namespace smf;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("smf_io_" + name)).string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& path, const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

std::string slurp_text(const std::string& path) {
    auto b = slurp(path);
    return {b.begin(), b.end()};
}

void put_u32(std::vector<char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

ModelDims tiny_dims() {
    ModelDims d;
    d.state_dim = 2;
    d.cond_dim = 2;
    d.embed_dim = 4;
    d.hidden = {3};
    return d;
}

std::vector<float> flat(const std::vector<Tensor<float>>& ps) {
    std::vector<float> v;
    for (const auto& p : ps) v.insert(v.end(), p.values().begin(), p.values().end());
    return v;
}

}  // namespace

TEST(Checkpoint, ByteLayout) {
    Rng rng(1);
    TeacherModel<float> m(tiny_dims(), rng);
    const auto bytes = encode_checkpoint(model_meta("teacher", m.dims(), 12, 0xABCDEF0123456789ULL), m.params());

    const std::string meta =
        "kind=teacher\nlayers=8,3,2\nembed_dim=4\niteration=12\nfingerprint=abcdef0123456789\n";
    std::vector<char> want = {'S', 'M', 'F', '1'};
    put_u32(want, 1);
    put_u32(want, static_cast<std::uint32_t>(meta.size()));
    want.insert(want.end(), meta.begin(), meta.end());
    for (const auto& p : m.params())
        for (float f : p.values()) {
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            put_u32(want, u);
        }
    EXPECT_EQ(bytes, want);
    // 8*3 + 3 + 3*2 + 2 network, 4 + 1 + 8*2 skip
    EXPECT_EQ(bytes.size(), 4 + 4 + 4 + meta.size() + 4 * (24 + 3 + 6 + 2 + 4 + 1 + 16));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    Rng rng(2);
    auto student = StudentModel<float>::from_teacher(TeacherModel<float>(tiny_dims(), rng));
    for (auto& p : student.params())
        for (auto& v : p.values()) v = static_cast<float>(rng.normal());
    const auto a = temp_path("student_a.smf"), b = temp_path("student_b.smf");
    save_model(student, 7, 99, a);
    CheckpointMeta meta;
    auto back = load_student(a, std::nullopt, &meta);
    EXPECT_EQ(meta.iteration, 7u);
    EXPECT_EQ(meta.fingerprint, 99u);
    EXPECT_EQ(flat(back.params()), flat(student.params()));
    save_model(back, meta.iteration, meta.fingerprint, b);
    EXPECT_EQ(slurp(a), slurp(b));

    Discriminator<float> disc(256, DiscriminatorInput::patch_features, 5, rng);
    save_model(disc, 3, 4, a);
    auto d2 = load_discriminator(a);
    save_model(d2, 3, 4, b);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_EQ(d2.input(), DiscriminatorInput::patch_features);
    std::filesystem::remove(a);
    std::filesystem::remove(b);
}

TEST(Checkpoint, TruncatedOrCorruptFilesAreFormatErrors) {
    Rng rng(3);
    TeacherModel<float> m(tiny_dims(), rng);
    const auto path = temp_path("trunc.smf");
    save_model(m, "teacher", 0, 0, path);
    const auto good = slurp(path);

    for (std::size_t cut : {good.size() - 1, good.size() - 4, std::size_t{20}, std::size_t{6}, std::size_t{0}}) {
        spit(path, std::vector<char>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)));
        EXPECT_THROW(load_teacher(path), format_error) << cut;
    }
    auto bad_magic = good;
    bad_magic[3] = '2';
    spit(path, bad_magic);
    EXPECT_THROW(load_teacher(path), format_error);
    auto bad_version = good;
    bad_version[4] = 9;
    spit(path, bad_version);
    EXPECT_THROW(load_teacher(path), format_error);
    auto extra = good;
    extra.push_back(0);
    spit(path, extra);
    EXPECT_THROW(load_teacher(path), format_error);
    std::filesystem::remove(path);
}

TEST(Checkpoint, MismatchedLayersFailBeforeLoading) {
    Rng rng(4);
    TeacherModel<float> m(tiny_dims(), rng);
    const auto path = temp_path("layers.smf");
    save_model(m, "teacher", 0, 0, path);
    try {
        load_teacher(path, std::vector<std::size_t>{8, 4, 2});
        FAIL();
    } catch (const dimension_error& e) {
        EXPECT_NE(std::string(e.what()).find("8,3,2"), std::string::npos);
    }
    EXPECT_NO_THROW(load_teacher(path, std::vector<std::size_t>{8, 3, 2}));
    EXPECT_THROW(load_student(path), format_error);  // wrong kind
    std::filesystem::remove(path);
}

TEST(Checkpoint, ParameterListMustMatchMetadata) {
    Rng rng(5);
    TeacherModel<float> m(tiny_dims(), rng);
    auto meta = model_meta("teacher", m.dims(), 0, 0);
    meta.embed_dim = 5;
    EXPECT_THROW(encode_checkpoint(meta, m.params()), dimension_error);
}

TEST(Config, UnknownAndDuplicateKeysAreErrors) {
    try {
        parse_config("seed = 3\nteacher.iterationz = 5\n");
        FAIL();
    } catch (const config_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("teacher.iterationz"), std::string::npos);
        EXPECT_NE(msg.find("line 2"), std::string::npos);
    }
    EXPECT_THROW(parse_config("seed = 3\nseed = 4\n"), config_error);
    EXPECT_THROW(parse_config("seed = three\n"), config_error);
    EXPECT_THROW(parse_config("distill.branch_probability = 1.5\n"), config_error);
    EXPECT_THROW(parse_config("just words\n"), config_error);
}

TEST(Config, ParsesValuesCommentsAndDefaults) {
    auto c = parse_config("# comment\nseed = 42  # trailing\nmodel.hidden = 16, 8\ndistill.boundary_guidance = 4.5\n");
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.hidden, (std::vector<std::size_t>{16, 8}));
    ASSERT_TRUE(c.distill.guidance_scale.has_value());
    EXPECT_EQ(*c.distill.guidance_scale, 4.5);
    const ExperimentConfig d;
    EXPECT_EQ(d.distill.branch_probability, 0.6);
    EXPECT_FALSE(d.distill.guidance_scale.has_value());
    EXPECT_EQ(d.eval.seeds, 20u);
    EXPECT_EQ(d.refine.weights.adversarial, 0.5);
}

TEST(Config, RoundTripPreservesFingerprint) {
    auto c = parse_config("seed = 9\nrefine.student_lr = 0.000123456789\nteacher.lr = 1e-3\nsampler.scheme = midpoint\n");
    const auto text = serialize_config(c);
    const auto back = parse_config(text);
    EXPECT_EQ(serialize_config(back), text);
    for (const auto& stage : pipeline_stages()) EXPECT_EQ(stage_fingerprint(c, stage), stage_fingerprint(back, stage));
}

TEST(Config, FingerprintsFollowStageDependencies) {
    const ExperimentConfig base;
    auto eval_only = base;
    eval_only.eval.seeds = 5;
    EXPECT_EQ(stage_fingerprint(base, "teacher"), stage_fingerprint(eval_only, "teacher"));
    EXPECT_EQ(stage_fingerprint(base, "refine"), stage_fingerprint(eval_only, "refine"));
    EXPECT_NE(stage_fingerprint(base, "eval"), stage_fingerprint(eval_only, "eval"));
    auto teacher_change = base;
    teacher_change.teacher.iterations = 1;
    for (const auto& stage : pipeline_stages())
        EXPECT_NE(stage_fingerprint(base, stage), stage_fingerprint(teacher_change, stage)) << stage;
    auto reseeded = base;
    reseeded.seed = 1;
    EXPECT_NE(stage_fingerprint(base, "teacher"), stage_fingerprint(reseeded, "teacher"));
    auto moved = base;
    moved.output_dir = "elsewhere";
    EXPECT_EQ(config_fingerprint(base), config_fingerprint(moved));
}

TEST(Config, StageSeedsComeFromTheMasterSeed) {
    ExperimentConfig c;
    c.seed = 123;
    EXPECT_EQ(stage_seed(c, "teacher"), derive_seed(123, "teacher"));
    EXPECT_NE(stage_seed(c, "teacher"), stage_seed(c, "distill"));
    EXPECT_EQ(distill_settings(c).seed, derive_seed(123, "distill"));
    EXPECT_EQ(refine_settings(c).seed, derive_seed(123, "refine"));
}

TEST(Csv, EmptyTableIsHeaderOnly) {
    const auto path = temp_path("empty.csv");
    emit_report(loss_table({}), path);
    EXPECT_EQ(slurp_text(path), "iteration,component,value\n");
    std::filesystem::remove(path);
}

TEST(Csv, OneRecordIsTwoLinesAndReemissionIsIdentical) {
    const auto path = temp_path("one.csv");
    emit_report(loss_table({{3, "fm", 0.1234567891}}), path);
    const auto first = slurp_text(path);
    EXPECT_EQ(first, "iteration,component,value\n3,fm,0.123457\n");
    emit_report(loss_table({{3, "fm", 0.1234567891}}), path);
    EXPECT_EQ(slurp_text(path), first);
    std::filesystem::remove(path);
}

TEST(Csv, SixSignificantDigits) {
    EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
    EXPECT_EQ(format_number(0.000012345678), "1.23457e-05");
    EXPECT_EQ(format_number(2.5), "2.5");
    EXPECT_EQ(format_number(-1.0 / 3.0), "-0.333333");
}

TEST(Csv, RowWidthMustMatchHeader) {
    CsvTable t{{"a", "b"}, {{std::string("x")}}};
    EXPECT_THROW(render_csv(t), std::invalid_argument);
    CsvTable q{{"a"}, {{std::string("has,comma")}}};
    EXPECT_EQ(render_csv(q), "a\n\"has,comma\"\n");
}

TEST(Csv, MetricTableLayout) {
    MetricReport rep;
    rep.metrics["sw"].per_seed = {{1, 0.5}, {2, 0.25}};
    rep.metrics["sw"].mean = 0.375;
    rep.metrics["sw"].std = 0.176777;
    EXPECT_EQ(render_csv(metric_table(rep)), "metric,seed,value\nsw,1,0.5\nsw,2,0.25\nsw,mean,0.375\nsw,std,0.176777\n");
}
