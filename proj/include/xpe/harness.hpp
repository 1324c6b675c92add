#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "xpe/pretrain.hpp"

namespace xpe {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Method labels
// ---------------------------------------------------------------------------

/// "SPT", "XPE" or "DUAL-<percent>", e.g. "DUAL-70".
inline std::string method_label(PromptMethod m, double dual_fraction) {
    if (m != PromptMethod::Dual) return to_string(m);
    return "DUAL-" + std::to_string(static_cast<int>(std::lround(dual_fraction * 100.0)));
}

inline std::pair<PromptMethod, double> parse_method_label(const std::string& label) {
    const auto dash = label.find('-');
    if (dash == std::string::npos) return {parse_method(label), 0.7};
    const auto head = parse_method(label.substr(0, dash));
    if (head != PromptMethod::Dual) throw ConfigError("only DUAL takes a fraction suffix: '" + label + "'");
    int pct = -1;
    const auto tail = label.substr(dash + 1);
    auto [p, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), pct);
    if (ec != std::errc{} || p != tail.data() + tail.size() || pct < 0 || pct > 100) {
        throw ConfigError("bad DUAL fraction in '" + label + "'");
    }
    return {PromptMethod::Dual, pct / 100.0};
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct DataSpec {
    std::string kind = "synthetic";  // synthetic | tsv
    // synthetic
    TopicTask task;
    std::size_t n_seen = 5;
    std::size_t n_unseen = 5;
    std::size_t n_per_class = 200;
    AlignmentProfile profile;
    std::uint64_t seed = 2024;
    // Examples per class and seen language in the surrogate pretraining corpus.
    std::size_t pretrain_per_class = 200;
    // tsv
    std::string dir;
    std::string grouping_file;
    std::size_t hash_bins = 30000;
};

inline void to_json(Json& j, const DataSpec& d) {
    TopicTask task = d.task;
    task.class_distributions.clear();
    j = Json{{"kind", d.kind}};
    if (d.kind == "synthetic") {
        j["task"] = task;
        j["n_seen"] = d.n_seen;
        j["n_unseen"] = d.n_unseen;
        j["n_per_class"] = d.n_per_class;
        j["profile"] = d.profile;
        j["seed"] = d.seed;
        j["pretrain_per_class"] = d.pretrain_per_class;
    } else {
        j["dir"] = d.dir;
        j["grouping_file"] = d.grouping_file;
        j["hash_bins"] = d.hash_bins;
    }
}

inline void from_json(const Json& j, DataSpec& d) {
    d.kind = j.value("kind", d.kind);
    if (j.contains("task")) d.task = j["task"].get<TopicTask>();
    d.n_seen = j.value("n_seen", d.n_seen);
    d.n_unseen = j.value("n_unseen", d.n_unseen);
    d.n_per_class = j.value("n_per_class", d.n_per_class);
    if (j.contains("profile")) d.profile = j["profile"].get<AlignmentProfile>();
    d.seed = j.value("seed", d.seed);
    d.pretrain_per_class = j.value("pretrain_per_class", d.pretrain_per_class);
    d.dir = j.value("dir", d.dir);
    d.grouping_file = j.value("grouping_file", d.grouping_file);
    d.hash_bins = j.value("hash_bins", d.hash_bins);
}

inline constexpr std::size_t kDefaultZeroShotSeeds = 10;
inline constexpr std::size_t kDefaultSequentialSeeds = 6;

struct ExperimentConfig {
    BackboneConfig backbone;
    PromptMethod method = PromptMethod::Xpe;
    double dual_fraction = 0.7;
    std::size_t prompt_length = 20;
    std::size_t bottleneck = 16;
    std::string source_set = "default";
    std::vector<std::string> sources;
    std::vector<std::string> targets;  // empty: every language outside the source set
    std::vector<std::uint64_t> seeds;  // empty: 10 for zero-shot, 6 for sequential
    PhasePlan source_plan = PhasePlan::source();
    PhasePlan target_plan = PhasePlan::target();
    PretrainOptions pretrain;
    std::uint64_t backbone_seed = 1;
    DataSpec data;
    std::string output_dir = "runs/default";
    std::vector<std::string> sweep_methods;

    std::string label() const { return method_label(method, dual_fraction); }

    std::vector<std::uint64_t> seeds_or(std::size_t default_count) const {
        if (!seeds.empty()) return seeds;
        std::vector<std::uint64_t> out(default_count);
        std::iota(out.begin(), out.end(), std::uint64_t{1});
        return out;
    }

    /// Checks everything that can be checked without touching data.
    void validate() const {
        backbone.validate(prompt_length, data.kind == "synthetic" ? data.task.max_length : 0);
        split_budget(prompt_length, method == PromptMethod::Dual ? dual_fraction : 0.0);
        if (bottleneck == 0) throw ConfigError("bottleneck must be positive");
        if (sources.empty()) throw ConfigError("source set '" + source_set + "' lists no languages");
        if (source_set.empty()) throw ConfigError("source set needs a name");
        source_plan.validate();
        target_plan.validate();
        if (output_dir.empty()) throw ConfigError("output_dir must be set");
        if (data.kind == "synthetic") {
            if (backbone.vocab_size < data.task.vocab_size()) {
                throw ConfigError("backbone vocab_size " + std::to_string(backbone.vocab_size) +
                                  " smaller than the synthetic vocabulary " +
                                  std::to_string(data.task.vocab_size()));
            }
            if (backbone.n_classes != data.task.n_classes) {
                throw ConfigError("backbone n_classes differs from the task's class count");
            }
        } else if (data.kind == "tsv") {
            if (data.dir.empty() || data.grouping_file.empty()) {
                throw ConfigError("tsv data needs 'dir' and 'grouping_file'");
            }
            if (backbone.vocab_size < 2 + data.hash_bins) {
                throw ConfigError("backbone vocab_size smaller than 2 + hash_bins");
            }
        } else {
            throw ConfigError("unknown data kind '" + data.kind + "'");
        }
        for (const auto& m : sweep_methods) parse_method_label(m);
    }
};

inline void to_json(Json& j, const ExperimentConfig& c) {
    j = Json{{"backbone", c.backbone},
             {"method", to_string(c.method)},
             {"dual_fraction", c.dual_fraction},
             {"prompt_length", c.prompt_length},
             {"bottleneck", c.bottleneck},
             {"source_set", c.source_set},
             {"sources", c.sources},
             {"targets", c.targets},
             {"seeds", c.seeds},
             {"source_plan", c.source_plan},
             {"target_plan", c.target_plan},
             {"pretrain", c.pretrain},
             {"backbone_seed", c.backbone_seed},
             {"data", c.data},
             {"output_dir", c.output_dir}};
    if (!c.sweep_methods.empty()) j["sweep_methods"] = c.sweep_methods;
}

inline void from_json(const Json& j, ExperimentConfig& c) {
    static const std::set<std::string> known{"backbone", "method", "dual_fraction", "prompt_length",
                                             "bottleneck", "source_set", "sources", "targets",
                                             "seeds", "source_plan", "target_plan", "pretrain",
                                             "backbone_seed", "data", "output_dir", "sweep_methods"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    if (j.contains("backbone")) c.backbone = j["backbone"].get<BackboneConfig>();
    if (j.contains("method")) {
        const auto [m, f] = parse_method_label(j["method"].get<std::string>());
        c.method = m;
        if (m == PromptMethod::Dual && j["method"].get<std::string>().find('-') != std::string::npos) {
            c.dual_fraction = f;
        }
    }
    c.dual_fraction = j.value("dual_fraction", c.dual_fraction);
    c.prompt_length = j.value("prompt_length", c.prompt_length);
    c.bottleneck = j.value("bottleneck", c.bottleneck);
    c.source_set = j.value("source_set", c.source_set);
    c.sources = j.value("sources", c.sources);
    c.targets = j.value("targets", c.targets);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("source_plan")) {
        PhasePlan p = PhasePlan::source();
        from_json(j["source_plan"], p);
        p.kind = PhaseKind::Source;
        c.source_plan = p;
    }
    if (j.contains("target_plan")) {
        PhasePlan p = PhasePlan::target();
        from_json(j["target_plan"], p);
        p.kind = PhaseKind::Target;
        c.target_plan = p;
    }
    if (j.contains("pretrain")) c.pretrain = j["pretrain"].get<PretrainOptions>();
    c.backbone_seed = j.value("backbone_seed", c.backbone_seed);
    if (j.contains("data")) c.data = j["data"].get<DataSpec>();
    c.output_dir = j.value("output_dir", c.output_dir);
    c.sweep_methods = j.value("sweep_methods", c.sweep_methods);
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    Json j;
    try {
        j = Json::parse(in, nullptr, true, true);
    } catch (const Json::exception& e) {
        throw FormatError("config '" + path.string() + "': " + e.what());
    }
    try {
        return j.get<ExperimentConfig>();
    } catch (const Json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
}

/// output_dir, placed under $XPE_OUTPUT_ROOT when that is set and the
/// directory is relative.
inline fs::path resolve_output_dir(const ExperimentConfig& c) {
    fs::path dir(c.output_dir);
    if (dir.is_relative()) {
        if (const char* root = std::getenv("XPE_OUTPUT_ROOT"); root && *root) return fs::path(root) / dir;
    }
    return dir;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

enum class Supervision { ZeroShot, Sequential };

inline std::string to_string(Supervision s) { return s == Supervision::ZeroShot ? "zero-shot" : "sequential"; }

inline Supervision parse_supervision(const std::string& s) {
    if (s == "zero-shot") return Supervision::ZeroShot;
    if (s == "sequential") return Supervision::Sequential;
    throw FormatError("unknown supervision '" + s + "'");
}

struct RunResult {
    std::string method;
    std::string source_set;
    std::string target;
    std::uint64_t seed = 0;
    Supervision supervision = Supervision::ZeroShot;
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::size_t steps = 0;
    double wall_seconds = 0.0;
};

inline void to_json(Json& j, const RunResult& r) {
    j = Json{{"method", r.method},   {"source_set", r.source_set},
             {"target", r.target},   {"seed", r.seed},
             {"supervision", to_string(r.supervision)},
             {"accuracy", r.accuracy}, {"correct", r.correct},
             {"total", r.total},     {"steps", r.steps},
             {"wall_seconds", r.wall_seconds}};
}

inline void from_json(const Json& j, RunResult& r) {
    r.method = j.at("method").get<std::string>();
    r.source_set = j.at("source_set").get<std::string>();
    r.target = j.at("target").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.supervision = parse_supervision(j.at("supervision").get<std::string>());
    r.accuracy = j.at("accuracy").get<double>();
    r.correct = j.value("correct", std::size_t{0});
    r.total = j.value("total", std::size_t{0});
    r.steps = j.value("steps", std::size_t{0});
    r.wall_seconds = j.value("wall_seconds", 0.0);
}

struct SeedFailure {
    std::uint64_t seed = 0;
    std::string message;
};

struct CampaignResult {
    std::vector<RunResult> results;
    std::vector<SeedFailure> failures;
    std::size_t source_phases = 0;
};

inline void write_results(const std::vector<RunResult>& results, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& r : results) out << Json(r).dump() << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<RunResult> read_results(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open results '" + path.string() + "'");
    std::vector<RunResult> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line).get<RunResult>());
        } catch (const Json::exception& e) {
            throw FormatError("'" + path.string() + "' line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Campaign preparation: data, grouping and the frozen backbone
// ---------------------------------------------------------------------------

struct Campaign {
    ExperimentConfig config;
    fs::path output_dir;
    std::vector<Dataset> datasets;
    LanguageGrouping grouping;
    EncoderStack stack;
    std::uint64_t backbone_checksum = 0;
    bool backbone_loaded = false;

    const Dataset& dataset(const std::string& language) const {
        for (const auto& d : datasets)
            if (d.language() == language) return d;
        throw ConfigError("no dataset for language '" + language + "'");
    }

    std::vector<std::string> targets() const {
        if (!config.targets.empty()) return config.targets;
        std::vector<std::string> out;
        for (const auto& l : grouping.all) {
            if (std::find(config.sources.begin(), config.sources.end(), l) == config.sources.end()) {
                out.push_back(l);
            }
        }
        return out;
    }

    void reset_access_logs() const {
        for (const auto& d : datasets) d.reset_access_log();
    }
};

/// The language family a synthetic data spec generates.
inline std::vector<SyntheticLanguage> synthetic_languages(const DataSpec& spec) {
    return generate_language_family(SeededRng(spec.seed).fork(1).next_u64(), spec.n_seen, spec.n_unseen,
                                    spec.profile, spec.task.n_concepts);
}

namespace detail {

/// Task datasets plus the separate pretraining corpora of the seen languages.
inline std::pair<std::vector<Dataset>, std::vector<Dataset>> synthetic_corpora(const DataSpec& spec,
                                                                               LanguageGrouping& grouping) {
    const auto task = make_topic_task(spec.task, spec.seed);
    const auto langs = synthetic_languages(spec);
    SeededRng task_rng = SeededRng(spec.seed).fork(2);
    SeededRng pretrain_rng = SeededRng(spec.seed).fork(3);
    // Parallel corpus: every language realizes the same latent examples.
    const auto latent = generate_latent(task, spec.n_per_class, task_rng);
    const auto pre_latent = generate_latent(task, spec.pretrain_per_class, pretrain_rng);
    std::vector<Dataset> task_sets, pretrain_sets;
    for (const auto& lang : langs) {
        task_sets.push_back(realize(latent, lang, task.n_classes));
        grouping.all.push_back(lang.id);
        if (lang.seen) {
            grouping.seen.insert(lang.id);
            pretrain_sets.push_back(realize(pre_latent, lang, task.n_classes));
        }
    }
    return {std::move(task_sets), std::move(pretrain_sets)};
}

inline std::pair<std::vector<Dataset>, std::vector<Dataset>> tsv_corpora(const DataSpec& spec,
                                                                         LanguageGrouping& grouping) {
    grouping = load_grouping(spec.grouping_file);
    std::vector<std::string> labels;
    TsvOptions opt;
    opt.hash_bins = spec.hash_bins;
    opt.split_seed = spec.seed;
    opt.label_vocabulary = &labels;
    std::vector<Dataset> task_sets;
    for (const auto& lang : grouping.all) {
        auto ds = load_tsv_dataset(fs::path(spec.dir) / (lang + ".tsv"), opt);
        ds.set_seen(grouping.seen.count(lang) > 0);
        task_sets.push_back(std::move(ds));
    }
    // Every file shares the final label inventory.
    std::vector<Dataset> fixed;
    for (const auto& ds : task_sets) {
        Dataset copy(ds.language(), labels.size(), labels);
        if (ds.seen()) copy.set_seen(*ds.seen());
        for (auto s : {Split::Train, Split::Dev, Split::Test})
            for (const auto& ex : ds.split(s)) copy.add(ex);
        fixed.push_back(std::move(copy));
    }
    std::vector<Dataset> pretrain_sets;
    for (const auto& ds : fixed)
        if (grouping.seen.count(ds.language())) pretrain_sets.push_back(ds);
    return {std::move(fixed), std::move(pretrain_sets)};
}

inline Json backbone_fingerprint(const ExperimentConfig& c) {
    return Json{{"backbone", c.backbone}, {"pretrain", c.pretrain},
                {"backbone_seed", c.backbone_seed}, {"data", c.data}};
}

}  // namespace detail

/// Builds the datasets and grouping, then pretrains the backbone or loads it
/// from `<output>/backbone.bin` when a file with the same fingerprint exists.
inline Campaign prepare_campaign(const ExperimentConfig& config, TrainLog* log = nullptr) {
    config.validate();
    Campaign c;
    c.config = config;
    c.output_dir = resolve_output_dir(config);
    auto [task_sets, pretrain_sets] = config.data.kind == "synthetic"
                                          ? detail::synthetic_corpora(config.data, c.grouping)
                                          : detail::tsv_corpora(config.data, c.grouping);
    c.datasets = std::move(task_sets);
    std::size_t longest = 0;
    for (const auto& d : c.datasets) {
        longest = std::max(longest, d.max_length());
        if (d.n_classes() != config.backbone.n_classes) {
            throw ConfigError("dataset '" + d.language() + "' has " + std::to_string(d.n_classes()) +
                              " classes, backbone expects " + std::to_string(config.backbone.n_classes));
        }
    }
    config.backbone.validate(config.prompt_length, longest);
    for (const auto& s : config.sources) {
        if (!c.grouping.contains(s)) throw ConfigError("source language '" + s + "' is not in the data");
    }
    for (const auto& t : config.targets) {
        if (!c.grouping.contains(t)) throw ConfigError("target language '" + t + "' is not in the data");
    }

    const auto fingerprint = detail::backbone_fingerprint(config);
    const auto weights_path = c.output_dir / "backbone.bin";
    SeededRng rng(config.backbone_seed);
    c.stack = EncoderStack(config.backbone, rng);
    bool loaded = false;
    if (fs::exists(weights_path)) {
        auto wf = load_weights(weights_path);
        if (wf.metadata.value("fingerprint", Json()) == fingerprint) {
            c.stack.load_values(wf);
            c.stack.freeze();
            for (const auto& [lang, acc] : wf.metadata.at("reference_accuracy").items()) {
                if (!c.grouping.reference_accuracy.count(lang)) c.grouping.reference_accuracy[lang] = acc.get<double>();
            }
            loaded = true;
        }
    }
    if (!loaded) {
        ClassificationHead head(config.backbone, rng);
        std::vector<const Dataset*> seen, probes;
        for (const auto& d : pretrain_sets) seen.push_back(&d);
        for (const auto& d : c.datasets) probes.push_back(&d);
        const auto report = pretrain_and_freeze(config.backbone, c.stack, head, seen, config.pretrain, rng, probes);
        for (const auto& [lang, acc] : report.probe_accuracy) {
            if (!c.grouping.reference_accuracy.count(lang)) c.grouping.reference_accuracy[lang] = acc;
        }
        Json meta{{"fingerprint", fingerprint},
                  {"reference_accuracy", report.probe_accuracy},
                  {"final_loss", report.final_loss},
                  {"seen_dev_accuracy", report.seen_dev_accuracy}};
        save_weights(weights_path, c.stack.named(), meta);
        if (log) {
            log->write({{"event", "pretrain"}, {"checksum", hex64(report.checksum)},
                        {"final_loss", report.final_loss}, {"seen_dev_accuracy", report.seen_dev_accuracy}});
        }
    }
    c.backbone_loaded = loaded;
    c.backbone_checksum = c.stack.checksum();
    c.grouping.source_sets[config.source_set] = config.sources;
    save_grouping(c.grouping, c.output_dir / "grouping.json");
    c.reset_access_logs();
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOutcome {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
};

/// Test-split accuracy with a cached prompt. Only the static matrix is used.
inline EvalOutcome evaluate_detailed(const BackboneConfig& config, const EncoderStack& stack,
                                     const ClassificationHead& head, const CachedPrompt& prompt,
                                     const Dataset& dataset, std::size_t batch_size = 64) {
    if (prompt.width() != config.d_model) {
        throw CompatibilityError("prompt width " + std::to_string(prompt.width()) +
                                 " does not match backbone d_model " + std::to_string(config.d_model));
    }
    const auto& test = dataset.test();
    const double acc = prompt_accuracy(config, stack, head, prompt.matrix(), test, batch_size);
    const auto correct = static_cast<std::size_t>(std::llround(acc * double(test.size())));
    return {acc, correct, test.size()};
}

inline double evaluate(const BackboneConfig& config, const EncoderStack& stack, const ClassificationHead& head,
                       const CachedPrompt& prompt, const Dataset& dataset, std::size_t batch_size = 64) {
    return evaluate_detailed(config, stack, head, prompt, dataset, batch_size).accuracy;
}

// ---------------------------------------------------------------------------
// Per-seed models and saved training state
// ---------------------------------------------------------------------------

inline PromptModel make_prompt_model(const Campaign& c, std::uint64_t seed) {
    const auto& cfg = c.config;
    SeededRng root(seed);
    SeededRng head_rng = root.fork(1);
    SeededRng prompt_rng = root.fork(2);
    return PromptModel{cfg.backbone, c.stack, ClassificationHead(cfg.backbone, head_rng),
                       make_prompt_components<float>(cfg.method, cfg.prompt_length, cfg.dual_fraction,
                                                     cfg.backbone.d_model, cfg.bottleneck, prompt_rng)};
}

/// Prompt components and head of a trained model.
inline void save_model_state(const PromptModel& m, const fs::path& path, const Json& metadata) {
    NamedTensors named;
    for (const auto& t : m.trainable_tensors()) named.emplace_back(t->name(), t.get());
    save_weights(path, named, metadata);
}

inline Json load_model_state(PromptModel& m, const fs::path& path) {
    const auto wf = load_weights(path);
    for (const auto& t : m.trainable_tensors()) {
        const auto& src = wf.at(t->name());
        if (src.shape() != t->shape()) {
            throw CompatibilityError("state tensor '" + t->name() + "' has shape " + shape_str(src.shape()) +
                                     ", model expects " + shape_str(t->shape()));
        }
        std::copy(src.values().begin(), src.values().end(), t->values().begin());
    }
    return wf.metadata;
}

namespace detail {

inline fs::path cache_path(const Campaign& c, std::uint64_t seed, const std::string& suffix) {
    return c.output_dir / "prompts" /
           (c.config.label() + "-" + c.config.source_set + "-seed" + std::to_string(seed) + suffix + ".cache");
}

inline std::vector<const Dataset*> source_datasets(const Campaign& c) {
    std::vector<const Dataset*> out;
    for (const auto& s : c.config.sources) out.push_back(&c.dataset(s));
    return out;
}

inline RunResult make_result(const Campaign& c, const std::string& target, std::uint64_t seed, Supervision sup,
                             const EvalOutcome& e, std::size_t steps, double seconds) {
    return RunResult{c.config.label(), c.config.source_set, target, seed, sup,
                     e.accuracy, e.correct, e.total, steps, seconds};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void log_failure(TrainLog* log, CampaignResult& out, std::uint64_t seed, const std::string& what) {
    out.failures.push_back({seed, what});
    if (log) log->write({{"event", "seed_failed"}, {"seed", seed}, {"message", what}});
}

}  // namespace detail

/// Zero-shot transfer: per seed, train on the source set, export the cached
/// prompt and evaluate every target with it. A failing seed is logged and
/// skipped.
inline CampaignResult run_zero_shot(const Campaign& c, TrainLog* log = nullptr) {
    CampaignResult out;
    const auto targets = c.targets();
    const auto sources = detail::source_datasets(c);
    for (const auto seed : c.config.seeds_or(kDefaultZeroShotSeeds)) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            c.reset_access_logs();
            auto model = make_prompt_model(c, seed);
            SeededRng rng = SeededRng(seed).fork(3);
            const auto phase = train_source(model, sources, c.config.source_plan, rng, log, seed);
            ++out.source_phases;
            CacheMetadata meta;
            meta.source_set = c.config.source_set;
            meta.seed = seed;
            meta.creation_step = phase.steps;
            const auto path = detail::cache_path(c, seed, "");
            export_cached_prompt(model.prompt, meta, path);
            const auto cached = load_cached_prompt(path, c.config.backbone);
            const std::size_t encoder_calls = model.prompt.encoder ? model.prompt.encoder->forward_count() : 0;
            const double train_seconds = detail::seconds_since(t0);
            for (const auto& target : targets) {
                const auto te = std::chrono::steady_clock::now();
                const auto e = evaluate_detailed(c.config.backbone, c.stack, model.head, cached, c.dataset(target),
                                                 c.config.source_plan.eval_batch_size);
                out.results.push_back(detail::make_result(c, target, seed, Supervision::ZeroShot, e, phase.steps,
                                                          train_seconds + detail::seconds_since(te)));
            }
            if (model.prompt.encoder && model.prompt.encoder->forward_count() != encoder_calls) {
                throw ContractError("prompt encoder ran during evaluation");
            }
            Json audit = Json::object();
            for (const auto& target : targets) {
                const auto& logd = c.dataset(target).access_log();
                audit[target] = {{"train", logd.train}, {"dev", logd.dev}, {"test", logd.test}};
                const bool is_source = std::find(c.config.sources.begin(), c.config.sources.end(), target) !=
                                       c.config.sources.end();
                if (!is_source && (logd.train != 0 || logd.dev != 0)) {
                    throw ContractError("zero-shot run read supervision of target '" + target + "'");
                }
            }
            if (log) log->write({{"event", "zero_shot_audit"}, {"seed", seed}, {"access", audit}});
        } catch (const std::exception& e) {
            detail::log_failure(log, out, seed, e.what());
        }
    }
    return out;
}

/// Sequential transfer: per seed one shared source phase, then for every
/// target a fresh copy of that state is adapted on the target and evaluated.
/// The pre-adaptation (zero-shot) accuracy of the same state is recorded too.
inline CampaignResult run_sequential(const Campaign& c, TrainLog* log = nullptr) {
    CampaignResult out;
    const auto targets = c.targets();
    const auto sources = detail::source_datasets(c);
    for (const auto seed : c.config.seeds_or(kDefaultSequentialSeeds)) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            auto model = make_prompt_model(c, seed);
            SeededRng rng = SeededRng(seed).fork(3);
            const auto phase = train_source(model, sources, c.config.source_plan, rng, log, seed);
            ++out.source_phases;
            if (log) log->write({{"event", "source_phase_done"}, {"seed", seed}, {"steps", phase.steps}});
            const auto tensors = model.trainable_tensors();
            const auto source_state = take_snapshot(tensors);
            const double source_seconds = detail::seconds_since(t0);

            CacheMetadata meta;
            meta.source_set = c.config.source_set;
            meta.seed = seed;
            meta.creation_step = phase.steps;
            const auto zs_path = detail::cache_path(c, seed, "");
            export_cached_prompt(model.prompt, meta, zs_path);
            const auto zs_cached = load_cached_prompt(zs_path, c.config.backbone);

            for (const auto& target : targets) {
                const auto tt = std::chrono::steady_clock::now();
                restore_snapshot(tensors, source_state);
                const auto& ds = c.dataset(target);
                const auto zs = evaluate_detailed(c.config.backbone, c.stack, model.head, zs_cached, ds,
                                                  c.config.target_plan.eval_batch_size);
                out.results.push_back(detail::make_result(c, target, seed, Supervision::ZeroShot, zs, phase.steps,
                                                          source_seconds));
                SeededRng target_rng = SeededRng(seed).fork(fnv1a(target));
                const auto adapted = adapt_target(model, ds, c.config.target_plan, target_rng, c.config.sources,
                                                  log, seed);
                meta.creation_step = phase.steps + adapted.steps;
                const auto path = detail::cache_path(c, seed, "-" + target);
                export_cached_prompt(model.prompt, meta, path);
                const auto cached = load_cached_prompt(path, c.config.backbone);
                const auto e = evaluate_detailed(c.config.backbone, c.stack, model.head, cached, ds,
                                                 c.config.target_plan.eval_batch_size);
                out.results.push_back(detail::make_result(c, target, seed, Supervision::Sequential, e,
                                                          phase.steps + adapted.steps,
                                                          source_seconds + detail::seconds_since(tt)));
            }
        } catch (const std::exception& e) {
            detail::log_failure(log, out, seed, e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct GroupAggregate {
    std::string group;
    std::string method;
    std::string source_set;
    Supervision supervision = Supervision::ZeroShot;
    std::vector<std::string> members;  // languages with results, sorted
    std::vector<std::pair<std::uint64_t, double>> per_seed;  // sorted by seed
    double mean = 0.0;
    double std = 0.0;

    bool empty() const { return per_seed.empty(); }
};

inline void to_json(Json& j, const GroupAggregate& a) {
    Json seeds = Json::array();
    for (const auto& [s, m] : a.per_seed) seeds.push_back({{"seed", s}, {"mean", m}});
    j = Json{{"group", a.group},     {"method", a.method},   {"source_set", a.source_set},
             {"supervision", to_string(a.supervision)},      {"members", a.members},
             {"per_seed", seeds},    {"mean", a.empty() ? Json() : Json(a.mean)},
             {"std", a.empty() ? Json() : Json(a.std)}};
}

/// Sample standard deviation (n−1); zero for fewer than two values.
inline double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
    double ss = 0.0;
    for (auto x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / double(xs.size() - 1));
}

/// Per (method, source set, supervision) and target group: the unweighted
/// mean over member-language accuracies for each seed, then the mean and
/// sample std over seeds. Results are ordered internally, so the input
/// order never matters.
inline std::vector<GroupAggregate> aggregate(const std::vector<RunResult>& results,
                                             const LanguageGrouping& grouping) {
    using Key = std::tuple<std::string, std::string, int>;
    // key -> language -> seed -> accuracy
    std::map<Key, std::map<std::string, std::map<std::uint64_t, double>>> table;
    for (const auto& r : results) {
        if (!grouping.contains(r.target)) {
            throw AggregationError("result for target '" + r.target + "' which is not in the grouping");
        }
        if (!grouping.source_sets.count(r.source_set)) {
            throw AggregationError("result for unknown source set '" + r.source_set + "'");
        }
        auto& slot = table[{r.method, r.source_set, int(r.supervision)}][r.target];
        if (!slot.emplace(r.seed, r.accuracy).second) {
            throw AggregationError("duplicate result for target '" + r.target + "' seed " + std::to_string(r.seed));
        }
    }
    std::vector<GroupAggregate> out;
    for (const auto& [key, by_lang] : table) {
        const auto& [method, source_set, sup] = key;
        const auto groups = resolve_groups(grouping, grouping.source_sets.at(source_set));
        for (const auto& [name, members] : groups.groups) {
            GroupAggregate a;
            a.group = name;
            a.method = method;
            a.source_set = source_set;
            a.supervision = Supervision(sup);
            std::map<std::uint64_t, std::vector<double>> per_seed;
            for (const auto& lang : members) {
                auto it = by_lang.find(lang);
                if (it == by_lang.end()) continue;
                a.members.push_back(lang);
                for (const auto& [seed, acc] : it->second) per_seed[seed].push_back(acc);
            }
            std::vector<double> means;
            for (const auto& [seed, accs] : per_seed) {
                const double m = std::accumulate(accs.begin(), accs.end(), 0.0) / double(accs.size());
                a.per_seed.emplace_back(seed, m);
                means.push_back(m);
            }
            if (!means.empty()) {
                a.mean = std::accumulate(means.begin(), means.end(), 0.0) / double(means.size());
                a.std = sample_std(means);
            }
            out.push_back(std::move(a));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { Csv, Markdown, Json };

inline ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::Csv;
    if (s == "md" || s == "markdown") return ReportFormat::Markdown;
    if (s == "json") return ReportFormat::Json;
    throw ConfigError("unknown report format '" + s + "' (expected csv, markdown or json)");
}

inline std::string report_extension(ReportFormat f) {
    switch (f) {
        case ReportFormat::Csv: return ".csv";
        case ReportFormat::Markdown: return ".md";
        case ReportFormat::Json: return ".json";
    }
    return "";
}

/// Shortest decimal that reads back to the same double.
inline std::string exact_decimal(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

/// Percentage with one decimal, "--" for an empty group.
inline std::string percent_cell(const GroupAggregate* a) {
    if (!a || a->empty()) return "--";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", a->mean * 100.0);
    return buf;
}

inline std::string render_csv(const std::vector<GroupAggregate>& aggs, const Json& config) {
    std::ostringstream os;
    os << "# config: " << config.dump() << '\n';
    os << "group,method,source_set,supervision,n_languages,n_seeds,mean,std\n";
    for (const auto& a : aggs) {
        os << a.group << ',' << a.method << ',' << a.source_set << ',' << to_string(a.supervision) << ','
           << a.members.size() << ',' << a.per_seed.size() << ',' << (a.empty() ? "" : exact_decimal(a.mean))
           << ',' << (a.empty() ? "" : exact_decimal(a.std)) << '\n';
    }
    return os.str();
}

/// Rows are the four target groups, columns the (method, source set,
/// supervision) combinations present.
inline std::string render_markdown(const std::vector<GroupAggregate>& aggs, const Json& config) {
    std::vector<std::string> columns;
    std::map<std::pair<std::string, std::string>, const GroupAggregate*> cell;
    for (const auto& a : aggs) {
        std::string col = a.method + " / " + a.source_set + " / " + to_string(a.supervision);
        if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
        cell[{a.group, col}] = &a;
    }
    std::ostringstream os;
    os << "<!-- config: " << config.dump() << " -->\n\n";
    os << "| Target group |";
    for (const auto& c : columns) os << ' ' << c << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) os << "---:|";
    os << '\n';
    for (const auto& g : kTargetGroupNames) {
        os << "| " << g << " |";
        for (const auto& c : columns) {
            auto it = cell.find({g, c});
            os << ' ' << percent_cell(it == cell.end() ? nullptr : it->second) << " |";
        }
        os << '\n';
    }
    return os.str();
}

inline std::string render_json(const std::vector<GroupAggregate>& aggs, const Json& config) {
    return Json{{"config", config}, {"aggregates", aggs}}.dump(2) + "\n";
}

inline std::string render_report(const std::vector<GroupAggregate>& aggs, ReportFormat format, const Json& config) {
    if (aggs.empty()) throw AggregationError("no aggregates to report");
    switch (format) {
        case ReportFormat::Csv: return render_csv(aggs, config);
        case ReportFormat::Markdown: return render_markdown(aggs, config);
        case ReportFormat::Json: return render_json(aggs, config);
    }
    return "";
}

inline void emit_report(const std::vector<GroupAggregate>& aggs, ReportFormat format, const fs::path& path,
                        const Json& config) {
    const auto text = render_report(aggs, format, config);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Parses the data rows of a csv report back into (group, method, mean, std).
struct CsvRow {
    std::string group, method, source_set, supervision;
    std::size_t n_languages = 0, n_seeds = 0;
    std::optional<double> mean, std;
};

inline std::vector<CsvRow> parse_report_csv(const std::string& text) {
    std::vector<CsvRow> rows;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() != 8) throw FormatError("csv row has " + std::to_string(f.size()) + " fields: " + line);
        CsvRow r{f[0], f[1], f[2], f[3], std::stoul(f[4]), std::stoul(f[5]), std::nullopt, std::nullopt};
        if (!f[6].empty()) r.mean = std::stod(f[6]);
        if (!f[7].empty()) r.std = std::stod(f[7]);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Writes results.jsonl and csv/markdown/json reports into the campaign's
/// output directory; returns the csv path.
inline fs::path write_campaign_outputs(const Campaign& c, const CampaignResult& r, const std::string& stem) {
    write_results(r.results, c.output_dir / (stem + "-results.jsonl"));
    const auto aggs = aggregate(r.results, c.grouping);
    const Json cfg = c.config;
    for (auto f : {ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Json}) {
        emit_report(aggs, f, c.output_dir / (stem + "-report" + report_extension(f)), cfg);
    }
    return c.output_dir / (stem + "-report.csv");
}

}  // namespace xpe
