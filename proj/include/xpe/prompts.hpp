#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xpe/backbone.hpp"

namespace xpe {

enum class PromptMethod { Spt, Xpe, Dual };

inline std::string to_string(PromptMethod m) {
    switch (m) {
        case PromptMethod::Spt: return "SPT";
        case PromptMethod::Xpe: return "XPE";
        case PromptMethod::Dual: return "DUAL";
    }
    return "?";
}

inline PromptMethod parse_method(const std::string& s) {
    if (s == "SPT" || s == "spt") return PromptMethod::Spt;
    if (s == "XPE" || s == "xpe") return PromptMethod::Xpe;
    if (s == "DUAL" || s == "dual") return PromptMethod::Dual;
    throw ConfigError("unknown prompt method '" + s + "' (expected SPT, XPE or DUAL)");
}

/// Split of a fixed prompt length between the standard and encoded parts.
struct DualBudget {
    std::size_t total = 0;
    double xpe_fraction = 0.0;
    std::size_t n_std = 0;
    std::size_t n_xpe = 0;
};

/// n_xpe = round-half-up(L·fraction), n_std = L − n_xpe.
inline DualBudget split_budget(std::size_t total, double xpe_fraction) {
    if (total == 0) throw ConfigError("split_budget: prompt length must be positive");
    if (!(xpe_fraction >= 0.0 && xpe_fraction <= 1.0)) {
        throw ConfigError("split_budget: fraction " + std::to_string(xpe_fraction) + " outside [0,1]");
    }
    // The epsilon absorbs representation error in products like 20 * 0.7.
    const auto n_xpe = static_cast<std::size_t>(std::floor(double(total) * xpe_fraction + 0.5 + 1e-9));
    return {total, xpe_fraction, total - n_xpe, n_xpe};
}

inline DualBudget budget_for(PromptMethod method, std::size_t total, double dual_fraction) {
    switch (method) {
        case PromptMethod::Spt: return split_budget(total, 0.0);
        case PromptMethod::Xpe: return split_budget(total, 1.0);
        case PromptMethod::Dual: return split_budget(total, dual_fraction);
    }
    throw ConfigError("budget_for: bad method");
}

/// Bottleneck residual MLP applied independently to each prompt row:
/// f(e) = e + W2·gelu(W1·e + b1) + b2.
template <typename Real>
class BasicPromptEncoder {
public:
    BasicPromptEncoder(std::size_t width, std::size_t bottleneck, SeededRng& rng)
        : width_(width), bottleneck_(bottleneck) {
        if (width == 0 || bottleneck == 0) throw ConfigError("prompt encoder extents must be positive");
        w1 = make_tensor<Real>({width, bottleneck}, "encoder.w1", true);
        b1 = make_tensor<Real>({bottleneck}, "encoder.b1", true);
        w2 = make_tensor<Real>({bottleneck, width}, "encoder.w2", true);
        b2 = make_tensor<Real>({width}, "encoder.b2", true);
        fill_normal(*w1, rng, 1.0 / std::sqrt(double(width)));
        // w2 and b2 start at zero, so the encoder starts as the identity.
    }

    BasicTensorPtr<Real> w1, b1, w2, b2;

    std::size_t width() const { return width_; }
    std::size_t bottleneck() const { return bottleneck_; }
    std::vector<BasicTensorPtr<Real>> tensors() const { return {w1, b1, w2, b2}; }
    std::uint64_t parameter_count() const {
        return std::uint64_t(width_) * bottleneck_ + bottleneck_ + std::uint64_t(bottleneck_) * width_ +
               width_;
    }

    /// Number of times the encoder has run; the cached inference path must
    /// leave it untouched.
    std::size_t forward_count() const { return *forward_count_; }
    void note_forward() const { ++*forward_count_; }

private:
    std::size_t width_;
    std::size_t bottleneck_;
    std::shared_ptr<std::size_t> forward_count_ = std::make_shared<std::size_t>(0);
};

using PromptEncoder = BasicPromptEncoder<float>;

/// Encodes every row of `pseudo` (n×d) with the shared encoder. Rows never
/// interact: row i of the output depends on row i of the input only.
template <typename Real>
BasicTensorPtr<Real> encode_prompt(BasicTape<Real>& tape, const BasicPromptEncoder<Real>& encoder,
                                   const BasicTensorPtr<Real>& pseudo) {
    if (pseudo->cols() != encoder.width()) {
        throw DimensionError("encode_prompt: rows of width " + std::to_string(pseudo->cols()) +
                             " for an encoder of width " + std::to_string(encoder.width()));
    }
    encoder.note_forward();
    using namespace ops;
    auto hidden = gelu(tape, add_bias(tape, matmul(tape, pseudo, encoder.w1), encoder.b1));
    auto delta = add_bias(tape, matmul(tape, hidden, encoder.w2), encoder.b2);
    return add(tape, pseudo, delta);
}

/// Single-row form; `row` holds d values.
template <typename Real>
BasicTensorPtr<Real> encode_row(BasicTape<Real>& tape, const BasicPromptEncoder<Real>& encoder,
                                const BasicTensorPtr<Real>& row) {
    if (row->numel() != encoder.width()) {
        throw DimensionError("encode_row: vector of " + std::to_string(row->numel()) +
                             " values for an encoder of width " + std::to_string(encoder.width()));
    }
    auto as_matrix = ops::concat_rows(tape, std::vector<BasicTensorPtr<Real>>{row});
    auto out = encode_prompt(tape, encoder, as_matrix);
    out->reshape({encoder.width()});
    return out;
}

/// Trainable state of one prompt method: the standard rows (SPT/DUAL), the
/// pseudo prompt and its encoder (XPE/DUAL).
template <typename Real>
struct BasicPromptComponents {
    PromptMethod method = PromptMethod::Xpe;
    DualBudget budget;
    BasicTensorPtr<Real> standard;
    BasicTensorPtr<Real> pseudo;
    std::optional<BasicPromptEncoder<Real>> encoder;

    /// Tensors optimized with the soft-prompt settings.
    std::vector<BasicTensorPtr<Real>> soft_prompt_tensors() const {
        if (standard) return {standard};
        return {};
    }

    /// Pseudo prompt plus encoder weights.
    std::vector<BasicTensorPtr<Real>> encoder_tensors() const {
        std::vector<BasicTensorPtr<Real>> out;
        if (pseudo) out.push_back(pseudo);
        if (encoder) {
            auto e = encoder->tensors();
            out.insert(out.end(), e.begin(), e.end());
        }
        return out;
    }

    std::vector<BasicTensorPtr<Real>> tensors() const {
        auto out = soft_prompt_tensors();
        auto e = encoder_tensors();
        out.insert(out.end(), e.begin(), e.end());
        return out;
    }
};

using PromptComponents = BasicPromptComponents<float>;

/// Fresh components: prompt rows ~ N(0, init_std²), encoder per BasicPromptEncoder.
template <typename Real = float>
BasicPromptComponents<Real> make_prompt_components(PromptMethod method, std::size_t length,
                                                   double dual_fraction, std::size_t width,
                                                   std::size_t bottleneck, SeededRng& rng,
                                                   double init_std = 0.02) {
    BasicPromptComponents<Real> pc;
    pc.method = method;
    pc.budget = budget_for(method, length, dual_fraction);
    if (pc.budget.n_std > 0) {
        pc.standard = make_tensor<Real>({pc.budget.n_std, width}, "prompt.standard", true);
        fill_normal(*pc.standard, rng, init_std);
    }
    if (pc.budget.n_xpe > 0) {
        pc.pseudo = make_tensor<Real>({pc.budget.n_xpe, width}, "prompt.pseudo", true);
        fill_normal(*pc.pseudo, rng, init_std);
        pc.encoder.emplace(width, bottleneck, rng);
    }
    return pc;
}

/// The L×d prompt the backbone sees: standard rows first, encoded rows after.
template <typename Real>
BasicTensorPtr<Real> assemble_prompt(BasicTape<Real>& tape, const BasicPromptComponents<Real>& pc) {
    const auto& b = pc.budget;
    const std::size_t have_std = pc.standard ? pc.standard->rows() : 0;
    const std::size_t have_xpe = pc.pseudo ? pc.pseudo->rows() : 0;
    if (have_std != b.n_std || have_xpe != b.n_xpe || b.n_std + b.n_xpe != b.total) {
        throw ConfigError("assemble_prompt: components hold " + std::to_string(have_std) + "+" +
                          std::to_string(have_xpe) + " rows, budget is " + std::to_string(b.n_std) +
                          "+" + std::to_string(b.n_xpe));
    }
    if (b.n_xpe > 0 && !pc.encoder) throw ConfigError("assemble_prompt: pseudo prompt without encoder");
    if (b.n_xpe == 0) return pc.standard;
    auto encoded = encode_prompt(tape, *pc.encoder, pc.pseudo);
    if (b.n_std == 0) return encoded;
    return ops::concat_rows(tape, std::vector<BasicTensorPtr<Real>>{pc.standard, encoded});
}

struct CacheMetadata {
    std::string method;
    std::size_t length = 0;
    std::size_t width = 0;
    std::string source_set;
    std::uint64_t seed = 0;
    std::uint64_t creation_step = 0;
    double xpe_fraction = 0.0;
};

inline bool operator==(const CacheMetadata& a, const CacheMetadata& b) {
    return a.method == b.method && a.length == b.length && a.width == b.width &&
           a.source_set == b.source_set && a.seed == b.seed && a.creation_step == b.creation_step &&
           a.xpe_fraction == b.xpe_fraction;
}

/// Static L×d prompt for inference. Nothing about the encoder survives.
class CachedPrompt {
public:
    CachedPrompt(CacheMetadata meta, Tensor matrix, std::uint64_t checksum)
        : meta_(std::move(meta)),
          matrix_(std::make_shared<Tensor>(std::move(matrix))),
          checksum_(checksum) {}

    const CacheMetadata& metadata() const { return meta_; }
    std::uint64_t checksum() const { return checksum_; }
    std::size_t length() const { return matrix_->rows(); }
    std::size_t width() const { return matrix_->cols(); }

    /// Read-only matrix; copied into a fresh non-trainable tensor so callers
    /// can never mutate the cache through the tape.
    TensorPtr matrix() const {
        return make_tensor<float>(matrix_->shape(),
                                  std::vector<float>(matrix_->values().begin(), matrix_->values().end()),
                                  "prompt.cached");
    }
    std::span<const float> values() const { return matrix_->values(); }

private:
    CacheMetadata meta_;
    std::shared_ptr<const Tensor> matrix_;
    std::uint64_t checksum_;
};

/// Runs assemble_prompt once and writes the static matrix to `path`.
inline CachedPrompt export_cached_prompt(const PromptComponents& pc, CacheMetadata meta,
                                         const std::filesystem::path& path) {
    Tape tape(false);
    auto prompt = assemble_prompt(tape, pc);
    meta.method = to_string(pc.method);
    meta.length = prompt->rows();
    meta.width = prompt->cols();
    meta.xpe_fraction = pc.budget.xpe_fraction;
    Json header{{"format", "xpe-prompt-cache"},
                {"version", 1},
                {"method", meta.method},
                {"L", meta.length},
                {"d", meta.width},
                {"xpe_fraction", meta.xpe_fraction},
                {"source_set", meta.source_set},
                {"seed", meta.seed},
                {"creation_step", meta.creation_step}};
    const auto payload = encode_f32(prompt->values());
    write_container(path, header, payload);
    Tensor matrix({meta.length, meta.width}, std::vector<float>(prompt->values().begin(), prompt->values().end()));
    return CachedPrompt(std::move(meta), std::move(matrix), crc64(payload));
}

/// Reads and verifies a cache file; throws IntegrityError on a checksum
/// mismatch.
inline CachedPrompt load_cached_prompt(const std::filesystem::path& path) {
    auto c = read_container(path);
    if (c.header.value("format", "") != "xpe-prompt-cache") {
        throw FormatError("'" + path.string() + "' is not a prompt cache");
    }
    CacheMetadata meta;
    try {
        meta.method = c.header.at("method").get<std::string>();
        meta.length = c.header.at("L").get<std::size_t>();
        meta.width = c.header.at("d").get<std::size_t>();
        meta.xpe_fraction = c.header.value("xpe_fraction", 0.0);
        meta.source_set = c.header.value("source_set", "");
        meta.seed = c.header.value("seed", std::uint64_t{0});
        meta.creation_step = c.header.value("creation_step", std::uint64_t{0});
    } catch (const Json::exception& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
    if (c.payload.size() != meta.length * meta.width * 4) {
        throw IntegrityError("'" + path.string() + "': payload does not hold " +
                             std::to_string(meta.length) + "x" + std::to_string(meta.width) + " floats");
    }
    Tensor matrix({meta.length, meta.width}, decode_f32(c.payload), "prompt.cached");
    return CachedPrompt(std::move(meta), std::move(matrix), crc64(c.payload));
}

/// As above, additionally rejecting caches whose width differs from the
/// backbone's hidden size.
inline CachedPrompt load_cached_prompt(const std::filesystem::path& path, const BackboneConfig& backbone) {
    auto cached = load_cached_prompt(path);
    if (cached.width() != backbone.d_model) {
        throw CompatibilityError("prompt cache '" + path.string() + "' has width " +
                                 std::to_string(cached.width()) + " but the backbone has d_model " +
                                 std::to_string(backbone.d_model));
    }
    return cached;
}

/// Counts for a hypothetical configuration (no allocation). Trainable is the
/// prompt components plus the head; the stack is frozen.
inline ParameterAccounting reference_accounting(const BackboneConfig& config, PromptMethod method,
                                                std::size_t prompt_length, double dual_fraction,
                                                std::size_t bottleneck) {
    const auto budget = budget_for(method, prompt_length, dual_fraction);
    const std::uint64_t d = config.d_model;
    ParameterAccounting acc;
    const std::uint64_t stack = stack_parameter_count(config);
    const std::uint64_t head = head_parameter_count(config);
    const std::uint64_t std_rows = budget.n_std * d;
    const std::uint64_t pseudo_rows = budget.n_xpe * d;
    const std::uint64_t encoder = budget.n_xpe > 0 ? 2 * d * bottleneck + bottleneck + d : 0;
    acc.components = {{"stack", stack},
                      {"head", head},
                      {"prompt.standard", std_rows},
                      {"prompt.pseudo", pseudo_rows},
                      {"encoder", encoder}};
    acc.trainable = head + std_rows + pseudo_rows + encoder;
    const std::uint64_t enumerated = stack + acc.trainable;
    acc.total = config.total_params_override.value_or(enumerated);
    if (acc.trainable > acc.total) throw ConfigError("parameter override below trainable count");
    acc.frozen = acc.total - acc.trainable;
    acc.trainable_fraction = double(acc.trainable) / double(acc.total);
    return acc;
}

}  // namespace xpe
