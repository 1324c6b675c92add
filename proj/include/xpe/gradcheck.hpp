#pragma once

#include <cstdint>
#include <vector>

#include "xpe/training.hpp"

namespace xpe {

/// Extents of the toy model used for gradient audits.
struct ToyShape {
    std::size_t d_model = 16;
    std::size_t n_layers = 1;
    std::size_t n_heads = 2;
    std::size_t d_ffn = 32;
    std::size_t vocab = 24;
    std::size_t n_classes = 3;
    std::size_t prompt_length = 4;
    std::size_t bottleneck = 4;
    std::size_t batch = 3;
    std::size_t text_length = 5;
};

/// Central-difference audit of prompt, pseudo prompt, encoder and head
/// gradients through a frozen double-precision backbone. Every trainable
/// tensor is redrawn from N(0, 0.1²) first, so no gradient is trivially zero.
inline GradCheckReport toy_gradcheck(PromptMethod method, double dual_fraction, std::uint64_t seed,
                                     double eps = 1e-3, const ToyShape& shape = {}) {
    BackboneConfig cfg;
    cfg.d_model = shape.d_model;
    cfg.n_layers = shape.n_layers;
    cfg.n_heads = shape.n_heads;
    cfg.d_ffn = shape.d_ffn;
    cfg.vocab_size = shape.vocab;
    cfg.max_positions = 1 + shape.prompt_length + shape.text_length;
    cfg.n_classes = shape.n_classes;
    SeededRng rng(seed);
    BasicEncoderStack<double> stack(cfg, rng);
    stack.freeze();
    BasicClassificationHead<double> head(cfg, rng);
    auto prompt = make_prompt_components<double>(method, shape.prompt_length, dual_fraction, cfg.d_model,
                                                 shape.bottleneck, rng);
    std::vector<BasicTensorPtr<double>> params = prompt.tensors();
    for (const auto& t : head.tensors()) params.push_back(t);
    for (const auto& t : params) fill_normal(*t, rng, 0.1);

    TokenBatch batch;
    batch.batch = shape.batch;
    batch.length = shape.text_length;
    for (std::size_t b = 0; b < shape.batch; ++b) {
        // Row b carries b trailing pads, so masking is exercised.
        const std::size_t real = shape.text_length - std::min(b, shape.text_length - 1);
        for (std::size_t t = 0; t < shape.text_length; ++t) {
            const bool on = t < real;
            batch.tokens.push_back(on ? int(2 + rng.uniform_int(shape.vocab - 2)) : cfg.pad_token);
            batch.mask.push_back(on ? 1 : 0);
        }
        batch.labels.push_back(int(rng.uniform_int(shape.n_classes)));
    }
    auto loss_fn = [&](BasicTape<double>& tape) {
        auto p = assemble_prompt(tape, prompt);
        auto logits = classify(tape, cfg, stack, head, p, batch);
        return ops::cross_entropy(tape, logits, std::span<const int>(batch.labels));
    };
    return finite_diff_check<double>(loss_fn, params, eps);
}

}  // namespace xpe
