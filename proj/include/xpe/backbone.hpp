#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "xpe/autodiff.hpp"
#include "xpe/serialization.hpp"

namespace xpe {

/// Shape of the transformer encoder and its classification head.
struct BackboneConfig {
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ffn = 64;
    std::size_t vocab_size = 130;
    std::size_t max_positions = 64;
    std::size_t n_classes = 7;
    std::optional<std::uint64_t> total_params_override;
    int pad_token = 0;
    int cls_token = 1;
    double layer_norm_eps = 1e-5;
    double embedding_init_std = 0.02;

    /// Throws ConfigError when extents are inconsistent. `prompt_length` and
    /// `max_text` are checked against max_positions when nonzero.
    void validate(std::size_t prompt_length = 0, std::size_t max_text = 0) const {
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("backbone config: " + what);
        };
        need(d_model > 0 && n_layers > 0 && n_heads > 0 && d_ffn > 0, "extents must be positive");
        need(vocab_size > 2 && max_positions > 0 && n_classes > 1, "extents must be positive");
        need(d_model % n_heads == 0, "d_model " + std::to_string(d_model) +
                                         " not divisible by n_heads " + std::to_string(n_heads));
        need(pad_token >= 0 && cls_token >= 0 && std::size_t(pad_token) < vocab_size &&
                 std::size_t(cls_token) < vocab_size,
             "special tokens outside the vocabulary");
        need(1 + prompt_length + max_text <= max_positions,
             "max_positions " + std::to_string(max_positions) + " < 1 + " +
                 std::to_string(prompt_length) + " + " + std::to_string(max_text));
    }
};

inline void to_json(Json& j, const BackboneConfig& c) {
    j = Json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
             {"n_heads", c.n_heads},       {"d_ffn", c.d_ffn},
             {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
             {"n_classes", c.n_classes},   {"pad_token", c.pad_token},
             {"cls_token", c.cls_token},   {"layer_norm_eps", c.layer_norm_eps},
             {"embedding_init_std", c.embedding_init_std}};
    if (c.total_params_override) j["total_params_override"] = *c.total_params_override;
}

inline void from_json(const Json& j, BackboneConfig& c) {
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.pad_token = j.value("pad_token", c.pad_token);
    c.cls_token = j.value("cls_token", c.cls_token);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
    c.embedding_init_std = j.value("embedding_init_std", c.embedding_init_std);
    if (j.contains("total_params_override") && !j["total_params_override"].is_null()) {
        c.total_params_override = j["total_params_override"].get<std::uint64_t>();
    } else {
        c.total_params_override.reset();
    }
}

/// Padded batch of token ids, row-major B×T. mask is 1 for real tokens.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask;
    std::vector<int> labels;
};

template <typename Real>
struct EncoderLayer {
    BasicTensorPtr<Real> ln1_gain, ln1_bias;
    BasicTensorPtr<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    BasicTensorPtr<Real> ln2_gain, ln2_bias;
    BasicTensorPtr<Real> w1, b1, w2, b2;
};

/// Token/position tables, pre-norm encoder layers and the final norm.
template <typename Real>
class BasicEncoderStack {
public:
    BasicEncoderStack() = default;

    BasicEncoderStack(const BackboneConfig& config, SeededRng& rng) {
        config.validate();
        const std::size_t d = config.d_model, f = config.d_ffn;
        auto param = [&](Shape shape, const std::string& name, double stddev) {
            auto t = make_tensor<Real>(std::move(shape), name, true);
            if (stddev > 0.0) fill_normal(*t, rng, stddev);
            tensors_.push_back(t);
            return t;
        };
        auto ones = [&](std::size_t n, const std::string& name) {
            auto t = param({n}, name, 0.0);
            fill_constant(*t, Real(1));
            return t;
        };
        const double emb = config.embedding_init_std;
        const double lin = 1.0 / std::sqrt(double(d));
        const double resid = lin / std::sqrt(2.0 * double(config.n_layers));
        token_embedding = param({config.vocab_size, d}, "embed.token", emb);
        position_embedding = param({config.max_positions, d}, "embed.position", emb);
        for (std::size_t l = 0; l < config.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            EncoderLayer<Real> L;
            L.ln1_gain = ones(d, p + "ln1.gain");
            L.ln1_bias = param({d}, p + "ln1.bias", 0.0);
            L.wq = param({d, d}, p + "attn.wq", lin);
            L.bq = param({d}, p + "attn.bq", 0.0);
            L.wk = param({d, d}, p + "attn.wk", lin);
            L.bk = param({d}, p + "attn.bk", 0.0);
            L.wv = param({d, d}, p + "attn.wv", lin);
            L.bv = param({d}, p + "attn.bv", 0.0);
            L.wo = param({d, d}, p + "attn.wo", resid);
            L.bo = param({d}, p + "attn.bo", 0.0);
            L.ln2_gain = ones(d, p + "ln2.gain");
            L.ln2_bias = param({d}, p + "ln2.bias", 0.0);
            L.w1 = param({d, f}, p + "ffn.w1", lin);
            L.b1 = param({f}, p + "ffn.b1", 0.0);
            L.w2 = param({f, d}, p + "ffn.w2", resid / std::sqrt(double(f) / double(d)));
            L.b2 = param({d}, p + "ffn.b2", 0.0);
            layers.push_back(std::move(L));
        }
        final_gain = ones(d, "final_norm.gain");
        final_bias = param({d}, "final_norm.bias", 0.0);
    }

    BasicTensorPtr<Real> token_embedding;
    BasicTensorPtr<Real> position_embedding;
    std::vector<EncoderLayer<Real>> layers;
    BasicTensorPtr<Real> final_gain, final_bias;

    /// Every parameter tensor in canonical order.
    const std::vector<BasicTensorPtr<Real>>& tensors() const { return tensors_; }

    bool frozen() const { return frozen_; }

    void freeze() {
        for (auto& t : tensors_) {
            t->set_trainable(false);
            t->clear_grad();
        }
        frozen_ = true;
    }

    /// Replaces every tensor's values with those stored under the same name.
    void load_values(const WeightFile& wf)
        requires std::is_same_v<Real, float>
    {
        for (auto& t : tensors_) {
            const auto& src = wf.at(t->name());
            if (src.shape() != t->shape()) {
                throw CompatibilityError("tensor '" + t->name() + "': file shape " +
                                         shape_str(src.shape()) + " vs model " + shape_str(t->shape()));
            }
            std::copy(src.values().begin(), src.values().end(), t->values().begin());
        }
    }

    NamedTensors named() const
        requires std::is_same_v<Real, float>
    {
        NamedTensors out;
        for (const auto& t : tensors_) out.emplace_back(t->name(), t.get());
        return out;
    }

    /// CRC-64 of the serialized weights; identical to the checksum recorded
    /// in a weight file written from this stack.
    std::uint64_t checksum() const
        requires std::is_same_v<Real, float>
    {
        return weights_checksum(named());
    }

private:
    std::vector<BasicTensorPtr<Real>> tensors_;
    bool frozen_ = false;
};

/// d→d (tanh) →K classifier applied to the pooled CLS state.
template <typename Real>
class BasicClassificationHead {
public:
    BasicClassificationHead() = default;

    BasicClassificationHead(const BackboneConfig& config, SeededRng& rng) {
        const std::size_t d = config.d_model, k = config.n_classes;
        proj_weight = make_tensor<Real>({d, d}, "head.proj.weight", true);
        proj_bias = make_tensor<Real>({d}, "head.proj.bias", true);
        out_weight = make_tensor<Real>({d, k}, "head.out.weight", true);
        out_bias = make_tensor<Real>({k}, "head.out.bias", true);
        fill_normal(*proj_weight, rng, 1.0 / std::sqrt(double(d)));
        fill_normal(*out_weight, rng, 1.0 / std::sqrt(double(d)));
    }

    BasicTensorPtr<Real> proj_weight, proj_bias, out_weight, out_bias;

    std::vector<BasicTensorPtr<Real>> tensors() const {
        return {proj_weight, proj_bias, out_weight, out_bias};
    }
    std::size_t n_classes() const { return out_bias->numel(); }
};

using EncoderStack = BasicEncoderStack<float>;
using ClassificationHead = BasicClassificationHead<float>;

/// Token-embedding lookup; positions are added later by inject_prompt.
/// Returns a [B×T×d] tensor.
template <typename Real>
BasicTensorPtr<Real> embed(BasicTape<Real>& tape, const BasicEncoderStack<Real>& stack,
                           const TokenBatch& batch) {
    const std::size_t vocab = stack.token_embedding->dim(0);
    const std::size_t d = stack.token_embedding->dim(1);
    std::vector<std::size_t> ids(batch.tokens.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int tok = batch.tokens[i];
        if (tok < 0 || std::size_t(tok) >= vocab) {
            throw IndexError("embed: token id " + std::to_string(tok) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        ids[i] = std::size_t(tok);
    }
    auto out = ops::gather_rows(tape, stack.token_embedding, ids);
    out->reshape({batch.batch, batch.length, d});
    return out;
}

/// Encoder input after prompt injection: (B·S)×d rows plus key mask.
template <typename Real>
struct InjectedSequence {
    BasicTensorPtr<Real> hidden;
    std::vector<std::uint8_t> mask;
    std::size_t batch = 0;
    std::size_t seq = 0;
};

/// Builds [CLS] ∥ prompt ∥ tokens per example and adds position embeddings
/// over the combined sequence. `prompt` may be null (L = 0).
template <typename Real>
InjectedSequence<Real> inject_prompt(BasicTape<Real>& tape, const BasicEncoderStack<Real>& stack,
                                     const BackboneConfig& config, const BasicTensorPtr<Real>& prompt,
                                     const BasicTensorPtr<Real>& token_embeds,
                                     std::span<const std::uint8_t> mask, std::size_t batch,
                                     std::size_t text_length) {
    const std::size_t d = config.d_model;
    const std::size_t L = prompt ? prompt->rows() : 0;
    if (prompt && prompt->cols() != d) {
        throw DimensionError("inject_prompt: prompt width " + std::to_string(prompt->cols()) +
                             " vs d_model " + std::to_string(d));
    }
    if (token_embeds->numel() != batch * text_length * d || mask.size() != batch * text_length) {
        throw DimensionError("inject_prompt: token embeddings " + shape_str(token_embeds->shape()) +
                             " inconsistent with batch " + std::to_string(batch) + "x" +
                             std::to_string(text_length));
    }
    const std::size_t seq = 1 + L + text_length;
    if (seq > config.max_positions) {
        throw CapacityError("inject_prompt: sequence of " + std::to_string(seq) +
                            " exceeds max_positions " + std::to_string(config.max_positions));
    }
    // Source rows: CLS embedding, prompt rows, then all token rows.
    const std::size_t cls_row = std::size_t(config.cls_token);
    auto cls = ops::gather_rows(tape, stack.token_embedding, std::span<const std::size_t>(&cls_row, 1));
    std::vector<BasicTensorPtr<Real>> parts{cls};
    if (L > 0) parts.push_back(prompt);
    if (batch * text_length > 0) parts.push_back(token_embeds);
    auto source = ops::concat_rows(tape, parts);

    std::vector<std::size_t> pick(batch * seq), positions(batch * seq);
    InjectedSequence<Real> out;
    out.mask.assign(batch * seq, 1);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            const std::size_t r = b * seq + s;
            positions[r] = s;
            if (s == 0) {
                pick[r] = 0;
            } else if (s <= L) {
                pick[r] = s;
            } else {
                const std::size_t t = s - 1 - L;
                pick[r] = 1 + L + b * text_length + t;
                out.mask[r] = mask[b * text_length + t];
            }
        }
    }
    auto rows = ops::gather_rows(tape, source, pick);
    auto pos = ops::gather_rows(tape, stack.position_embedding, positions);
    out.hidden = ops::add(tape, rows, pos);
    out.hidden->reshape({batch, seq, d});
    out.batch = batch;
    out.seq = seq;
    return out;
}

/// Pre-norm encoder, CLS pooling and head. Returns [B×K] logits.
template <typename Real>
BasicTensorPtr<Real> forward(BasicTape<Real>& tape, const BackboneConfig& config,
                             const BasicEncoderStack<Real>& stack,
                             const BasicClassificationHead<Real>& head,
                             const InjectedSequence<Real>& input) {
    using namespace ops;
    const double eps = config.layer_norm_eps;
    auto x = input.hidden;
    for (const auto& L : stack.layers) {
        auto h = layer_norm(tape, x, L.ln1_gain, L.ln1_bias, eps);
        auto q = add_bias(tape, matmul(tape, h, L.wq), L.bq);
        auto k = add_bias(tape, matmul(tape, h, L.wk), L.bk);
        auto v = add_bias(tape, matmul(tape, h, L.wv), L.bv);
        auto a = attention(tape, q, k, v, input.batch, input.seq, config.n_heads,
                           std::span<const std::uint8_t>(input.mask));
        x = add(tape, x, add_bias(tape, matmul(tape, a, L.wo), L.bo));
        auto h2 = layer_norm(tape, x, L.ln2_gain, L.ln2_bias, eps);
        auto f = gelu(tape, add_bias(tape, matmul(tape, h2, L.w1), L.b1));
        x = add(tape, x, add_bias(tape, matmul(tape, f, L.w2), L.b2));
    }
    x = layer_norm(tape, x, stack.final_gain, stack.final_bias, eps);
    std::vector<std::size_t> cls_rows(input.batch);
    for (std::size_t b = 0; b < input.batch; ++b) cls_rows[b] = b * input.seq;
    auto pooled = gather_rows(tape, x, cls_rows);
    auto z = ops::tanh(tape, add_bias(tape, matmul(tape, pooled, head.proj_weight), head.proj_bias));
    return add_bias(tape, matmul(tape, z, head.out_weight), head.out_bias);
}

/// embed → inject_prompt → forward in one call.
template <typename Real>
BasicTensorPtr<Real> classify(BasicTape<Real>& tape, const BackboneConfig& config,
                              const BasicEncoderStack<Real>& stack,
                              const BasicClassificationHead<Real>& head,
                              const BasicTensorPtr<Real>& prompt, const TokenBatch& batch) {
    auto tokens = embed(tape, stack, batch);
    auto input = inject_prompt(tape, stack, config, prompt, tokens, batch.mask, batch.batch, batch.length);
    return forward(tape, config, stack, head, input);
}

/// Parameter totals. When an override total is supplied it replaces the
/// enumerated total and the frozen count absorbs the difference.
struct ParameterAccounting {
    std::uint64_t total = 0;
    std::uint64_t trainable = 0;
    std::uint64_t frozen = 0;
    double trainable_fraction = 0.0;
    std::vector<std::pair<std::string, std::uint64_t>> components;
};

inline void to_json(Json& j, const ParameterAccounting& a) {
    j = Json{{"total", a.total}, {"trainable", a.trainable}, {"frozen", a.frozen},
             {"trainable_fraction", a.trainable_fraction}};
    Json comps = Json::object();
    for (const auto& [name, n] : a.components) comps[name] = n;
    j["components"] = comps;
}

/// A named group of tensors counted together (stack, head, prompt parts).
template <typename Real>
struct ParameterComponent {
    std::string name;
    std::vector<BasicTensorPtr<Real>> tensors;
};

template <typename Real>
ParameterAccounting count_parameters(std::span<const ParameterComponent<Real>> components,
                                     std::optional<std::uint64_t> total_override = std::nullopt) {
    ParameterAccounting acc;
    std::uint64_t enumerated = 0;
    for (const auto& c : components) {
        std::uint64_t n = 0;
        for (const auto& t : c.tensors) {
            n += t->numel();
            if (t->trainable()) acc.trainable += t->numel();
        }
        enumerated += n;
        acc.components.emplace_back(c.name, n);
    }
    acc.total = total_override.value_or(enumerated);
    if (acc.trainable > acc.total) {
        throw ConfigError("parameter override " + std::to_string(acc.total) +
                          " is smaller than the trainable count " + std::to_string(acc.trainable));
    }
    acc.frozen = acc.total - acc.trainable;
    acc.trainable_fraction = acc.total ? double(acc.trainable) / double(acc.total) : 0.0;
    return acc;
}

/// Element counts implied by a config, without allocating anything.
inline std::uint64_t stack_parameter_count(const BackboneConfig& c) {
    const std::uint64_t d = c.d_model, f = c.d_ffn;
    const std::uint64_t per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
    return c.vocab_size * d + c.max_positions * d + c.n_layers * per_layer + 2 * d;
}

inline std::uint64_t head_parameter_count(const BackboneConfig& c) {
    const std::uint64_t d = c.d_model, k = c.n_classes;
    return (d * d + d) + (d * k + k);
}

}  // namespace xpe
