#pragma once

// SMF1 checkpoint files:
//   "SMF1" | version u32 | metadata length u32 | metadata UTF-8 | f32 LE params
// Metadata is newline-separated key=value text in a fixed key order.

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "flow.hpp"
#include "isc.hpp"
#include "refine.hpp"

namespace smf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::string kind;  // teacher | student | regularizer | discriminator
    std::vector<std::size_t> layer_sizes;
    std::size_t embed_dim = 0;      // velocity models
    std::size_t sample_dim = 0;     // discriminator
    std::string input = "raw";      // discriminator input features
    std::uint64_t iteration = 0;
    std::uint64_t fingerprint = 0;  // config fingerprint of the stage that wrote it

    bool operator==(const CheckpointMeta&) const = default;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what, int base = 10) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used, base);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw format_error("checkpoint: bad " + what + " '" + s + "'");
    }
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_u64(item, "layer size"));
    if (out.size() < 2) throw format_error("checkpoint: need at least two layer sizes");
    return out;
}

}  // namespace detail

inline std::string encode_meta(const CheckpointMeta& m) {
    std::string s = "kind=" + m.kind + "\nlayers=" + detail::join_sizes(m.layer_sizes) + "\n";
    if (m.kind == "discriminator") {
        s += "sample_dim=" + std::to_string(m.sample_dim) + "\ninput=" + m.input + "\n";
    } else {
        s += "embed_dim=" + std::to_string(m.embed_dim) + "\n";
    }
    s += "iteration=" + std::to_string(m.iteration) + "\nfingerprint=" + hex64(m.fingerprint) + "\n";
    return s;
}

inline CheckpointMeta decode_meta(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::stringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw format_error("checkpoint: malformed metadata line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw format_error("checkpoint: metadata lacks '" + k + "'");
        return it->second;
    };
    CheckpointMeta m;
    m.kind = get("kind");
    m.layer_sizes = detail::parse_sizes(get("layers"));
    if (m.kind == "discriminator") {
        m.sample_dim = detail::parse_u64(get("sample_dim"), "sample_dim");
        m.input = get("input");
        if (m.input != "raw" && m.input != "patch") throw format_error("checkpoint: unknown discriminator input " + m.input);
    } else if (m.kind == "teacher" || m.kind == "student" || m.kind == "regularizer") {
        m.embed_dim = detail::parse_u64(get("embed_dim"), "embed_dim");
    } else {
        throw format_error("checkpoint: unknown model kind '" + m.kind + "'");
    }
    m.iteration = detail::parse_u64(get("iteration"), "iteration");
    m.fingerprint = detail::parse_u64(get("fingerprint"), "fingerprint", 16);
    return m;
}

/// Parameter shapes in declared order, derived from metadata alone.
inline std::vector<Shape> parameter_shapes(const CheckpointMeta& m) {
    std::vector<Shape> shapes;
    const auto& l = m.layer_sizes;
    for (std::size_t i = 0; i + 1 < l.size(); ++i) {
        shapes.push_back({l[i], l[i + 1]});
        shapes.push_back({l[i + 1]});
    }
    if (m.kind == "discriminator") return shapes;
    const std::size_t in = l.front(), state = l.back();
    if (m.embed_dim == 0 || in <= state + m.embed_dim) throw format_error("checkpoint: inconsistent model widths");
    shapes.push_back({m.embed_dim, 1});
    shapes.push_back({1});
    shapes.push_back({in, state});
    if (m.kind == "student") {
        shapes.push_back({m.embed_dim, l[1]});
        shapes.push_back({m.embed_dim, 1});
    }
    return shapes;
}

inline ModelDims dims_from_meta(const CheckpointMeta& m) {
    ModelDims d;
    d.state_dim = m.layer_sizes.back();
    d.embed_dim = m.embed_dim;
    d.cond_dim = m.layer_sizes.front() - d.state_dim - d.embed_dim;
    d.hidden.assign(m.layer_sizes.begin() + 1, m.layer_sizes.end() - 1);
    return d;
}

inline std::vector<char> encode_checkpoint(const CheckpointMeta& meta, const std::vector<Tensor<float>>& params) {
    const auto shapes = parameter_shapes(meta);
    if (shapes.size() != params.size()) throw dimension_error("checkpoint: parameter list does not match metadata");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != shapes[i])
            throw dimension_error("checkpoint: parameter " + std::to_string(i) + " has shape " +
                                  shape_str(params[i].shape()) + ", metadata says " + shape_str(shapes[i]));
    }
    ByteWriter w;
    w.bytes("SMF1");
    w.u32(kCheckpointVersion);
    const auto text = encode_meta(meta);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
    for (const auto& p : params) w.f32s(p.values());
    return w.data();
}

struct RawCheckpoint {
    CheckpointMeta meta;
    std::vector<Tensor<float>> params;
};

/// Parses and validates the header and metadata first; parameters are only
/// allocated once the declared sizes agree with `expected_layers` (when given)
/// and with the payload length.
inline RawCheckpoint decode_checkpoint(std::vector<char> bytes, const std::string& origin = "<memory>",
                                       const std::optional<std::vector<std::size_t>>& expected_layers = std::nullopt) {
    ByteReader r(std::move(bytes));
    if (r.remaining() < 4 || r.bytes(4) != "SMF1") throw format_error("checkpoint: bad magic in " + origin);
    if (auto v = r.u32(); v != kCheckpointVersion)
        throw format_error("checkpoint: unsupported version " + std::to_string(v) + " in " + origin);
    const auto len = r.u32();
    auto meta = decode_meta(r.bytes(len));
    if (expected_layers && *expected_layers != meta.layer_sizes)
        throw dimension_error("checkpoint: " + origin + " has layers " + detail::join_sizes(meta.layer_sizes) +
                              ", expected " + detail::join_sizes(*expected_layers));
    const auto shapes = parameter_shapes(meta);
    std::uint64_t count = 0;
    for (const auto& s : shapes) count += shape_size(s);
    if (r.remaining() != count * 4)
        throw format_error("checkpoint: payload of " + std::to_string(r.remaining()) + " bytes, expected " +
                           std::to_string(count * 4) + " in " + origin);
    RawCheckpoint out{std::move(meta), {}};
    for (const auto& s : shapes) out.params.push_back(Tensor<float>::parameter(s, r.f32s(shape_size(s))));
    return out;
}

inline void save_checkpoint(const CheckpointMeta& meta, const std::vector<Tensor<float>>& params, const std::string& path) {
    write_file(path, encode_checkpoint(meta, params));
}

inline RawCheckpoint load_checkpoint(const std::string& path,
                                     const std::optional<std::vector<std::size_t>>& expected_layers = std::nullopt) {
    return decode_checkpoint(read_file(path), path, expected_layers);
}

// ---------------------------------------------------------------- typed models

inline CheckpointMeta model_meta(const std::string& kind, const ModelDims& dims, std::uint64_t iteration,
                                 std::uint64_t fingerprint) {
    return {kind, dims.layer_sizes(), dims.embed_dim, 0, "raw", iteration, fingerprint};
}

inline void save_model(const TeacherModel<float>& m, const std::string& kind, std::uint64_t iteration,
                       std::uint64_t fingerprint, const std::string& path) {
    save_checkpoint(model_meta(kind, m.dims(), iteration, fingerprint), m.params(), path);
}

inline void save_model(const StudentModel<float>& m, std::uint64_t iteration, std::uint64_t fingerprint,
                       const std::string& path) {
    save_checkpoint(model_meta("student", m.dims(), iteration, fingerprint), m.params(), path);
}

inline void save_model(const Discriminator<float>& d, std::uint64_t iteration, std::uint64_t fingerprint,
                       const std::string& path) {
    CheckpointMeta m{"discriminator", d.net().layer_sizes(), 0, d.sample_dim(),
                     d.input() == DiscriminatorInput::raw ? "raw" : "patch", iteration, fingerprint};
    save_checkpoint(m, d.params(), path);
}

inline void require_kind(const RawCheckpoint& c, std::initializer_list<const char*> kinds, const std::string& path) {
    for (const char* k : kinds)
        if (c.meta.kind == k) return;
    throw format_error("checkpoint: " + path + " holds a " + c.meta.kind + " model");
}

/// Teacher or regularizer (same architecture).
inline TeacherModel<float> load_teacher(const std::string& path,
                                        const std::optional<std::vector<std::size_t>>& expected_layers = std::nullopt,
                                        CheckpointMeta* meta = nullptr) {
    auto c = load_checkpoint(path, expected_layers);
    require_kind(c, {"teacher", "regularizer"}, path);
    if (meta) *meta = c.meta;
    const auto dims = dims_from_meta(c.meta);
    const std::size_t n = c.params.size();
    std::vector<Tensor<float>> net(c.params.begin(), c.params.end() - 3);
    SkipPath<float> skip{c.params[n - 3], c.params[n - 2], c.params[n - 1]};
    return TeacherModel<float>(dims, Mlp<float>(dims.layer_sizes(), std::move(net)), std::move(skip));
}

inline StudentModel<float> load_student(const std::string& path,
                                        const std::optional<std::vector<std::size_t>>& expected_layers = std::nullopt,
                                        CheckpointMeta* meta = nullptr) {
    auto c = load_checkpoint(path, expected_layers);
    require_kind(c, {"student"}, path);
    if (meta) *meta = c.meta;
    const auto dims = dims_from_meta(c.meta);
    const std::size_t n = c.params.size();
    std::vector<Tensor<float>> net(c.params.begin(), c.params.end() - 5);
    SkipPath<float> skip{c.params[n - 5], c.params[n - 4], c.params[n - 3]};
    return StudentModel<float>(dims, Mlp<float>(dims.layer_sizes(), std::move(net)), std::move(skip), c.params[n - 2],
                               c.params[n - 1]);
}

inline Discriminator<float> load_discriminator(const std::string& path, CheckpointMeta* meta = nullptr) {
    auto c = load_checkpoint(path);
    require_kind(c, {"discriminator"}, path);
    if (meta) *meta = c.meta;
    const auto input = c.meta.input == "raw" ? DiscriminatorInput::raw : DiscriminatorInput::patch_features;
    return Discriminator<float>(c.meta.sample_dim, input, Mlp<float>(c.meta.layer_sizes, std::move(c.params)));
}

}  // namespace smf
