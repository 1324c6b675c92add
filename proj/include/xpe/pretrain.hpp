#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "xpe/training.hpp"

namespace xpe {

/// Surrogate pretraining: supervised classification over seen languages
/// with no prompt, standing in for multilingual pretraining of the backbone.
struct PretrainOptions {
    std::size_t steps = 3000;
    std::size_t batch_size = 32;
    double lr = 2e-3;
    double weight_decay = 0.0;
    std::size_t n_cycles = 1;
};

inline void to_json(Json& j, const PretrainOptions& o) {
    j = Json{{"steps", o.steps}, {"batch_size", o.batch_size}, {"lr", o.lr},
             {"weight_decay", o.weight_decay}, {"n_cycles", o.n_cycles}};
}

inline void from_json(const Json& j, PretrainOptions& o) {
    o.steps = j.value("steps", o.steps);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.lr = j.value("lr", o.lr);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.n_cycles = j.value("n_cycles", o.n_cycles);
}

struct PretrainReport {
    std::uint64_t checksum = 0;
    double final_loss = 0.0;
    double seen_dev_accuracy = 0.0;
    // Test accuracy of the pretrained model on each probe language, measured
    // before the head is re-initialized.
    std::map<std::string, double> probe_accuracy;
};

/// Trains stack and head on the seen datasets, freezes the stack, records
/// its checksum and re-initializes the head from `rng`.
inline PretrainReport pretrain_and_freeze(const BackboneConfig& config, EncoderStack& stack,
                                          ClassificationHead& head, std::span<const Dataset* const> seen,
                                          const PretrainOptions& options, SeededRng& rng,
                                          std::span<const Dataset* const> probes = {}) {
    if (seen.empty()) throw ConfigError("pretrain: no datasets");
    std::vector<ExamplePool> pools;
    std::vector<LabeledExample> dev;
    for (const auto* ds : seen) {
        if (ds->seen() && !*ds->seen()) {
            throw ConfigError("pretrain: language '" + ds->language() + "' is tagged unseen");
        }
        pools.push_back({ds->language(), &ds->train()});
        const auto& d = ds->dev();
        dev.insert(dev.end(), d.begin(), d.end());
    }
    std::size_t n_train = 0;
    for (const auto& p : pools) n_train += p.examples->size();
    if (n_train == 0) throw ConfigError("pretrain: datasets hold no training examples");
    if (options.steps < options.n_cycles) throw ConfigError("pretrain: too few steps");

    std::vector<TensorPtr> params = stack.tensors();
    for (const auto& t : head.tensors()) params.push_back(t);
    Adafactor opt({{"backbone", params, options.lr, options.weight_decay}});
    const CosineRestartSchedule schedule{1.0, 0.0, options.steps, options.n_cycles};
    PretrainReport report;
    double recent = 0.0;
    std::size_t recent_n = 0;
    for (std::size_t step = 0; step < options.steps; ++step) {
        auto sampled = sample_multisource_batch(pools, options.batch_size, rng, config.pad_token);
        Tape tape;
        auto logits = classify(tape, config, stack, head, TensorPtr{}, sampled.batch);
        auto loss = ops::cross_entropy(tape, logits, std::span<const int>(sampled.batch.labels));
        tape.backward(loss);
        opt.step(lr_at(schedule, step));
        opt.zero_grad();
        if (step + 100 >= options.steps) {
            recent += (*loss)[0];
            ++recent_n;
        }
    }
    report.final_loss = recent_n ? recent / double(recent_n) : 0.0;
    if (!dev.empty()) report.seen_dev_accuracy = prompt_accuracy(config, stack, head, TensorPtr{}, dev);
    for (const auto* ds : probes) {
        report.probe_accuracy[ds->language()] = prompt_accuracy(config, stack, head, TensorPtr{}, ds->test());
    }
    stack.freeze();
    report.checksum = stack.checksum();
    head = ClassificationHead(config, rng);
    return report;
}

}  // namespace xpe
