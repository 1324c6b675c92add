#pragma once

#include <vector>

#include "xpe/training.hpp"

namespace fixtures {

/// A small synthetic world: short sequences, a d=16 backbone and a few languages.
struct TinyWorld {
    xpe::TopicTask task;
    xpe::BackboneConfig config;
    std::vector<xpe::SyntheticLanguage> languages;
    std::vector<xpe::Dataset> datasets;
};

inline TinyWorld tiny_world(std::size_t n_languages = 3, std::size_t per_class = 30, std::uint64_t seed = 5) {
    TinyWorld w;
    w.task.n_classes = 3;
    w.task.n_concepts = 24;
    w.task.keywords_per_class = 4;
    w.task.min_length = 4;
    w.task.max_length = 6;
    w.task = xpe::make_topic_task(w.task, seed);
    w.config.d_model = 16;
    w.config.n_layers = 1;
    w.config.n_heads = 2;
    w.config.d_ffn = 32;
    w.config.vocab_size = w.task.vocab_size();
    w.config.max_positions = 16;
    w.config.n_classes = 3;
    xpe::AlignmentProfile profile;
    w.languages = xpe::generate_language_family(seed, n_languages, 0, profile, w.task.n_concepts);
    xpe::SeededRng rng(seed + 1);
    const auto latent = xpe::generate_latent(w.task, per_class, rng);
    for (const auto& l : w.languages) w.datasets.push_back(xpe::realize(latent, l, w.task.n_classes));
    return w;
}

inline xpe::PromptModel tiny_model(const TinyWorld& w, xpe::PromptMethod method, std::uint64_t seed = 1,
                                   std::size_t prompt_length = 4) {
    xpe::SeededRng rng(seed);
    xpe::EncoderStack stack(w.config, rng);
    stack.freeze();
    xpe::ClassificationHead head(w.config, rng);
    auto prompt = xpe::make_prompt_components<float>(method, prompt_length, 0.5, w.config.d_model, 4, rng);
    return xpe::PromptModel{w.config, stack, head, prompt};
}

inline xpe::PhasePlan tiny_plan(std::size_t steps, xpe::PhaseKind kind = xpe::PhaseKind::Source) {
    auto p = kind == xpe::PhaseKind::Source ? xpe::PhasePlan::source() : xpe::PhasePlan::target();
    p.max_steps = steps;
    p.batch_size = 8;
    p.prompt_lr = 5e-2;
    p.encoder_lr = 5e-3;
    return p;
}

}  // namespace fixtures
