#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "xpe/data.hpp"
#include "xpe/optim.hpp"
#include "xpe/prompts.hpp"

namespace xpe {

enum class PhaseKind { Source, Target };

inline std::string to_string(PhaseKind k) { return k == PhaseKind::Source ? "source" : "target"; }

/// Budget and optimizer settings of one training phase.
struct PhasePlan {
    PhaseKind kind = PhaseKind::Source;
    std::size_t max_steps = 24000;
    std::size_t batch_size = 32;
    std::size_t n_cycles = 2;
    std::size_t patience = 20;
    double prompt_lr = 5e-3;
    double prompt_weight_decay = 0.0;
    double encoder_lr = 5e-5;
    double encoder_weight_decay = 0.1;
    std::size_t eval_batch_size = 64;

    static PhasePlan source() { return {}; }
    static PhasePlan target() {
        PhasePlan p;
        p.kind = PhaseKind::Target;
        p.max_steps = 6000;
        p.patience = 30;
        return p;
    }

    /// Early stopping is armed once the first schedule cycle has finished.
    std::size_t armed_after_step() const { return max_steps / n_cycles; }

    void validate() const {
        if (max_steps == 0 || batch_size == 0 || n_cycles == 0 || max_steps < n_cycles) {
            throw ConfigError("phase plan: steps, batch size and cycles must be positive");
        }
    }
};

inline void to_json(Json& j, const PhasePlan& p) {
    j = Json{{"kind", to_string(p.kind)},
             {"max_steps", p.max_steps},
             {"batch_size", p.batch_size},
             {"n_cycles", p.n_cycles},
             {"patience", p.patience},
             {"prompt_lr", p.prompt_lr},
             {"prompt_weight_decay", p.prompt_weight_decay},
             {"encoder_lr", p.encoder_lr},
             {"encoder_weight_decay", p.encoder_weight_decay},
             {"eval_batch_size", p.eval_batch_size}};
}

inline void from_json(const Json& j, PhasePlan& p) {
    if (j.contains("kind")) p.kind = j["kind"] == "target" ? PhaseKind::Target : PhaseKind::Source;
    p.max_steps = j.value("max_steps", p.max_steps);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.n_cycles = j.value("n_cycles", p.n_cycles);
    p.patience = j.value("patience", p.patience);
    p.prompt_lr = j.value("prompt_lr", p.prompt_lr);
    p.prompt_weight_decay = j.value("prompt_weight_decay", p.prompt_weight_decay);
    p.encoder_lr = j.value("encoder_lr", p.encoder_lr);
    p.encoder_weight_decay = j.value("encoder_weight_decay", p.encoder_weight_decay);
    p.eval_batch_size = j.value("eval_batch_size", p.eval_batch_size);
}

struct EarlyStopPolicy {
    std::size_t patience = 20;
    std::size_t armed_after_step = 0;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t since_improvement = 0;
};

enum class StopDecision { Continue, Stop };

/// Called once per validation. Before arming the policy only tracks the best
/// metric; afterwards a strict improvement resets the counter and anything
/// else increments it, stopping once the counter exceeds the patience.
inline StopDecision early_stop_update(EarlyStopPolicy& policy, std::size_t step, std::size_t /*epoch*/,
                                      double metric) {
    const bool improved = metric > policy.best;
    if (improved) policy.best = metric;
    if (step < policy.armed_after_step) {
        policy.since_improvement = 0;
        return StopDecision::Continue;
    }
    policy.since_improvement = improved ? 0 : policy.since_improvement + 1;
    return policy.since_improvement > policy.patience ? StopDecision::Stop : StopDecision::Continue;
}

/// Frozen backbone, head and prompt components trained together.
struct PromptModel {
    BackboneConfig config;
    EncoderStack stack;
    ClassificationHead head;
    PromptComponents prompt;

    /// Prompt parameters followed by the head.
    std::vector<TensorPtr> trainable_tensors() const {
        auto out = prompt.tensors();
        for (const auto& t : head.tensors()) out.push_back(t);
        return out;
    }

    std::vector<ParameterComponent<float>> components() const {
        return {{"stack", stack.tensors()},
                {"head", head.tensors()},
                {"prompt.standard", prompt.soft_prompt_tensors()},
                {"prompt.encoder", prompt.encoder_tensors()}};
    }
};

/// Soft-prompt rows in one group; pseudo prompt, encoder and head in the
/// other. Empty groups are dropped.
inline std::vector<ParamGroup> make_param_groups(const PromptModel& model, const PhasePlan& plan) {
    std::vector<ParamGroup> groups;
    auto soft = model.prompt.soft_prompt_tensors();
    if (!soft.empty()) groups.push_back({"soft-prompt", soft, plan.prompt_lr, plan.prompt_weight_decay});
    auto rest = model.prompt.encoder_tensors();
    for (const auto& t : model.head.tensors()) rest.push_back(t);
    groups.push_back({"encoder+head", rest, plan.encoder_lr, plan.encoder_weight_decay});
    check_partition(groups);
    return groups;
}

/// Pads to the longest example; padded positions carry mask 0.
inline TokenBatch make_batch(std::span<const LabeledExample* const> examples, int pad_token) {
    TokenBatch b;
    b.batch = examples.size();
    for (const auto* e : examples) b.length = std::max(b.length, e->tokens.size());
    b.tokens.assign(b.batch * b.length, pad_token);
    b.mask.assign(b.batch * b.length, 0);
    b.labels.reserve(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) {
        const auto& toks = examples[i]->tokens;
        std::copy(toks.begin(), toks.end(), b.tokens.begin() + i * b.length);
        std::fill_n(b.mask.begin() + i * b.length, toks.size(), 1);
        b.labels.push_back(examples[i]->label);
    }
    return b;
}

struct ExamplePool {
    std::string language;
    const std::vector<LabeledExample>* examples = nullptr;
};

struct SampledBatch {
    TokenBatch batch;
    std::vector<std::string> languages;
};

/// Draws `batch_size` examples uniformly (with replacement) from the union
/// of all pools.
inline SampledBatch sample_multisource_batch(std::span<const ExamplePool> pools, std::size_t batch_size,
                                             SeededRng& rng, int pad_token) {
    std::size_t total = 0;
    for (const auto& p : pools) total += p.examples ? p.examples->size() : 0;
    if (total == 0) throw ConfigError("sample_multisource_batch: every source pool is empty");
    std::vector<const LabeledExample*> picked;
    SampledBatch out;
    picked.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::size_t idx = rng.uniform_int(total);
        for (const auto& p : pools) {
            const std::size_t n = p.examples ? p.examples->size() : 0;
            if (idx < n) {
                picked.push_back(&(*p.examples)[idx]);
                out.languages.push_back(p.language);
                break;
            }
            idx -= n;
        }
    }
    out.batch = make_batch(picked, pad_token);
    return out;
}

/// Index of the largest logit; ties go to the lowest index.
inline int argmax_row(const Tensor& logits, std::size_t row) {
    int best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits.at(row, j) > logits.at(row, std::size_t(best))) best = int(j);
    }
    return best;
}

/// Accuracy of argmax predictions with a fixed prompt matrix (may be null).
inline double prompt_accuracy(const BackboneConfig& config, const EncoderStack& stack,
                              const ClassificationHead& head, const TensorPtr& prompt,
                              const std::vector<LabeledExample>& examples, std::size_t batch_size = 64) {
    if (examples.empty()) throw ConfigError("accuracy over an empty example set");
    std::size_t correct = 0;
    std::vector<const LabeledExample*> chunk;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        chunk.clear();
        for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
            chunk.push_back(&examples[i]);
        }
        auto batch = make_batch(chunk, config.pad_token);
        Tape tape(false);
        auto logits = classify(tape, config, stack, head, prompt, batch);
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            if (argmax_row(*logits, r) == chunk[r]->label) ++correct;
        }
    }
    return double(correct) / double(examples.size());
}

/// Values of a tensor list, for best-state snapshots.
using Snapshot = std::vector<std::vector<float>>;

inline Snapshot take_snapshot(const std::vector<TensorPtr>& tensors) {
    Snapshot s;
    for (const auto& t : tensors) s.emplace_back(t->values().begin(), t->values().end());
    return s;
}

inline void restore_snapshot(const std::vector<TensorPtr>& tensors, const Snapshot& s) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::copy(s[i].begin(), s[i].end(), tensors[i]->values().begin());
    }
}

/// Newline-delimited JSON training log; records are also kept in memory.
class TrainLog {
public:
    explicit TrainLog(std::ostream* sink = nullptr) : sink_(sink) {}

    void write(const Json& record) {
        records_.push_back(record);
        if (sink_) *sink_ << record.dump() << std::endl;
    }
    const std::vector<Json>& records() const { return records_; }

private:
    std::ostream* sink_;
    std::vector<Json> records_;
};

struct PhaseOutcome {
    std::size_t steps = 0;
    std::size_t epochs = 0;
    double best_val_acc = 0.0;
    std::size_t best_step = 0;
    bool stopped_early = false;
};

inline void require_frozen(const EncoderStack& stack) {
    for (const auto& t : stack.tensors()) {
        if (t->trainable()) {
            throw ContractError("backbone tensor '" + t->name() + "' is trainable; freeze the stack first");
        }
    }
}

namespace detail {

inline PhaseOutcome run_phase(PromptModel& model, std::span<const ExamplePool> train_pools,
                              const std::vector<LabeledExample>& validation, const PhasePlan& plan,
                              SeededRng& rng, TrainLog* log, std::uint64_t seed, const std::string& tag) {
    plan.validate();
    require_frozen(model.stack);
    std::size_t n_train = 0;
    for (const auto& p : train_pools) n_train += p.examples->size();
    if (n_train == 0) throw ConfigError(to_string(plan.kind) + " phase: no training examples");
    if (validation.empty()) throw ConfigError(to_string(plan.kind) + " phase: no validation examples");

    const auto groups = make_param_groups(model, plan);
    Adafactor opt(groups);
    const auto tensors = model.trainable_tensors();
    const CosineRestartSchedule unit{1.0, 0.0, plan.max_steps, plan.n_cycles};
    EarlyStopPolicy policy{plan.patience, plan.armed_after_step()};
    const std::size_t steps_per_epoch = (n_train + plan.batch_size - 1) / plan.batch_size;

    if (log) {
        Json header{{"event", "phase_start"}, {"phase", to_string(plan.kind)}, {"seed", seed},
                    {"plan", plan}, {"optimizer", opt.options()}, {"steps_per_epoch", steps_per_epoch}};
        if (!tag.empty()) header["tag"] = tag;
        log->write(header);
    }

    PhaseOutcome outcome;
    Snapshot best = take_snapshot(tensors);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t step = 0; step < plan.max_steps; ++step) {
        const double scale = lr_at(unit, step);
        auto sampled = sample_multisource_batch(train_pools, plan.batch_size, rng, model.config.pad_token);
        Tape tape;
        auto prompt = assemble_prompt(tape, model.prompt);
        auto logits = classify(tape, model.config, model.stack, model.head, prompt, sampled.batch);
        auto loss = ops::cross_entropy(tape, logits, std::span<const int>(sampled.batch.labels));
        tape.backward(loss);
        opt.step(scale);
        opt.zero_grad();
        loss_sum += (*loss)[0];
        ++loss_count;
        outcome.steps = step + 1;

        const bool epoch_end = (step + 1) % steps_per_epoch == 0 || step + 1 == plan.max_steps;
        if (!epoch_end) continue;
        ++outcome.epochs;
        Tape inference(false);
        auto fixed = assemble_prompt(inference, model.prompt);
        const double val = prompt_accuracy(model.config, model.stack, model.head, fixed, validation,
                                           plan.eval_batch_size);
        if (outcome.epochs == 1 || val > outcome.best_val_acc) {
            outcome.best_val_acc = val;
            outcome.best_step = step + 1;
            best = take_snapshot(tensors);
        }
        const auto decision = early_stop_update(policy, step + 1, outcome.epochs, val);
        if (log) {
            Json lrs = Json::object();
            for (const auto& g : groups) lrs[g.name] = g.lr * scale;
            Json rec{{"step", step + 1}, {"epoch", outcome.epochs}, {"phase", to_string(plan.kind)},
                     {"lr", lrs}, {"loss", loss_sum / double(loss_count)}, {"val_acc", val}, {"seed", seed}};
            if (!tag.empty()) rec["tag"] = tag;
            log->write(rec);
        }
        loss_sum = 0.0;
        loss_count = 0;
        if (decision == StopDecision::Stop) {
            outcome.stopped_early = true;
            break;
        }
    }
    restore_snapshot(tensors, best);
    return outcome;
}

}  // namespace detail

/// Multi-source phase: the shared prompt and head are trained on the union
/// of the sources' train splits and validated on their dev splits. The
/// best-validation state is left in `model`.
inline PhaseOutcome train_source(PromptModel& model, std::span<const Dataset* const> sources,
                                 const PhasePlan& plan, SeededRng& rng, TrainLog* log = nullptr,
                                 std::uint64_t seed = 0) {
    if (sources.empty()) throw ConfigError("train_source: no source languages");
    std::vector<ExamplePool> pools;
    std::vector<LabeledExample> validation;
    for (const auto* ds : sources) {
        pools.push_back({ds->language(), &ds->train()});
        const auto& dev = ds->dev();
        validation.insert(validation.end(), dev.begin(), dev.end());
    }
    return detail::run_phase(model, pools, validation, plan, rng, log, seed, "");
}

/// Continues training the same parameters on a single target language with
/// a fresh schedule. A target that was also a source is allowed but logged.
inline PhaseOutcome adapt_target(PromptModel& model, const Dataset& target, const PhasePlan& plan,
                                 SeededRng& rng, const std::vector<std::string>& source_languages = {},
                                 TrainLog* log = nullptr, std::uint64_t seed = 0) {
    if (target.size(Split::Train) == 0) {
        throw ConfigError("adapt_target: target '" + target.language() + "' has no training data");
    }
    if (log && std::find(source_languages.begin(), source_languages.end(), target.language()) !=
                   source_languages.end()) {
        log->write({{"event", "warning"},
                    {"message", "target '" + target.language() + "' was also a source language"},
                    {"seed", seed}});
    }
    const std::vector<ExamplePool> pools{{target.language(), &target.train()}};
    return detail::run_phase(model, pools, target.dev(), plan, rng, log, seed, target.language());
}

}  // namespace xpe
