#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "xpe/xpe.hpp"

namespace xpe::cli {

inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// 1602823 -> "1,602,823".
inline std::string with_commas(std::uint64_t v) {
    auto s = std::to_string(v);
    for (int i = int(s.size()) - 3; i > 0; i -= 3) s.insert(std::size_t(i), ",");
    return s;
}

/// Applies "a.b.c=value" to a JSON object; value is parsed as JSON and taken
/// as a plain string when that fails.
inline void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const auto path = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::exception&) {
        value = text;
    }
    std::string pointer = "/";
    for (char ch : path) pointer += ch == '.' ? '/' : ch;
    j[Json::json_pointer(pointer)] = value;
}

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::string output_dir;
    std::vector<std::uint64_t> seeds;
    std::string method;
    std::vector<std::string> sources;
    std::vector<std::string> targets;
};

inline ExperimentConfig resolve_config(const CommonOptions& o) {
    Json j = Json::object();
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw IoError("cannot open config '" + o.config + "'");
        try {
            j = Json::parse(in, nullptr, true, true);
        } catch (const Json::exception& e) {
            throw FormatError("config '" + o.config + "': " + e.what());
        }
    }
    for (const auto& a : o.overrides) apply_override(j, a);
    if (!o.output_dir.empty()) j["output_dir"] = o.output_dir;
    if (!o.seeds.empty()) j["seeds"] = o.seeds;
    if (!o.method.empty()) j["method"] = o.method;
    if (!o.sources.empty()) j["sources"] = o.sources;
    if (!o.targets.empty()) j["targets"] = o.targets;
    try {
        return j.get<ExperimentConfig>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline void add_common(CLI::App* sub, CommonOptions& o) {
    sub->add_option("-c,--config", o.config, "experiment config (JSON)");
    sub->add_option("--set", o.overrides, "override a config field, e.g. source_plan.max_steps=500");
    sub->add_option("-o,--output-dir", o.output_dir, "output directory");
    sub->add_option("--seeds", o.seeds, "seed list");
    sub->add_option("--method", o.method, "SPT, XPE or DUAL-<percent>");
    sub->add_option("--sources", o.sources, "source languages");
    sub->add_option("--targets", o.targets, "target languages");
}

inline fs::path default_state_path(const Campaign& c, std::uint64_t seed, const std::string& target = "") {
    return c.output_dir / "state" /
           (c.config.label() + "-" + c.config.source_set + "-seed" + std::to_string(seed) +
            (target.empty() ? "" : "-" + target) + ".bin");
}

inline int print_campaign(std::ostream& out, const Campaign& c, const CampaignResult& r, const std::string& stem) {
    const auto csv = write_campaign_outputs(c, r, stem);
    std::ifstream md(c.output_dir / (stem + "-report.md"));
    out << md.rdbuf();
    out << "results: " << (c.output_dir / (stem + "-results.jsonl")).string() << "\nreport: " << csv.string()
        << '\n';
    for (const auto& f : r.failures) out << "seed " << f.seed << " failed: " << f.message << '\n';
    return r.results.empty() ? kExitFailure : 0;
}

/// Entry point of the `xpe` tool; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Soft-prompt tuning with cross-prompt encoders on a frozen backbone", "xpe"};
    app.require_subcommand(1);
    CommonOptions common;
    std::uint64_t seed = 1;
    std::string target, state_in, state_out, cache_path, language, results_path, grouping_path, report_out,
        format = "markdown", data_out;
    std::size_t prompt_length = 0;
    double eps = 1e-3;

    auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus as TSV files");
    add_common(gen, common);
    gen->add_option("--out", data_out, "directory for the TSV files");

    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone (or reuse a saved one)");
    add_common(pre, common);

    auto* ts = app.add_subcommand("train-source", "multi-source prompt training for one seed");
    add_common(ts, common);
    ts->add_option("--seed", seed, "seed");
    ts->add_option("--state-out", state_out, "where to save prompt and head");

    auto* at = app.add_subcommand("adapt-target", "continue training on one target language");
    add_common(at, common);
    at->add_option("--seed", seed, "seed");
    at->add_option("--target", target, "target language")->required();
    at->add_option("--state-in", state_in, "state saved by train-source");
    at->add_option("--state-out", state_out, "where to save the adapted state");

    auto* ex = app.add_subcommand("export-prompt", "write the static prompt cache of a saved state");
    add_common(ex, common);
    ex->add_option("--seed", seed, "seed");
    ex->add_option("--state-in", state_in, "saved state")->required();
    ex->add_option("--out", cache_path, "cache file")->required();

    auto* ev = app.add_subcommand("eval", "test accuracy of a cached prompt on one language");
    add_common(ev, common);
    ev->add_option("--seed", seed, "seed");
    ev->add_option("--state-in", state_in, "saved state providing the head")->required();
    ev->add_option("--cache", cache_path, "prompt cache")->required();
    ev->add_option("--language", language, "language to evaluate")->required();

    auto* zs = app.add_subcommand("run-zs", "zero-shot campaign over all seeds");
    add_common(zs, common);
    auto* seq = app.add_subcommand("run-seq", "sequential campaign over all seeds");
    add_common(seq, common);

    auto* rep = app.add_subcommand("report", "aggregate a results file into a report");
    add_common(rep, common);
    rep->add_option("--results", results_path, "results .jsonl")->required();
    rep->add_option("--grouping", grouping_path, "grouping file (default: <output>/grouping.json)");
    rep->add_option("--format", format, "csv, markdown or json")
        ->check(CLI::IsMember({"csv", "markdown", "md", "json"}));
    rep->add_option("--out", report_out, "output file (default: stdout)");

    auto* par = app.add_subcommand("params", "parameter accounting for the configured shape");
    add_common(par, common);
    par->add_option("--prompt-length", prompt_length, "override prompt length");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit on a toy model");
    add_common(gc, common);
    gc->add_option("--seed", seed, "seed");
    gc->add_option("--eps", eps, "central-difference step");

    auto* sw = app.add_subcommand("sweep", "zero-shot campaign for each method in sweep_methods");
    add_common(sw, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (*par) {
            auto cfg = resolve_config(common);
            const std::size_t L = prompt_length ? prompt_length : cfg.prompt_length;
            cfg.backbone.validate();
            const auto acc = reference_accounting(cfg.backbone, cfg.method, L, cfg.dual_fraction, cfg.bottleneck);
            char frac[32];
            std::snprintf(frac, sizeof frac, "%.6f", acc.trainable_fraction);
            out << "method=" << cfg.label() << " L=" << L << '\n';
            for (const auto& [name, n] : acc.components) out << "  " << name << '=' << with_commas(n) << '\n';
            out << "trainable=" << with_commas(acc.trainable) << '\n'
                << "total=" << with_commas(acc.total) << '\n'
                << "frozen=" << with_commas(acc.frozen) << '\n'
                << "fraction=" << frac << '\n';
            return 0;
        }
        if (*gc) {
            double worst = 0.0;
            for (auto [m, f] : {std::pair{PromptMethod::Spt, 0.0}, std::pair{PromptMethod::Xpe, 1.0},
                                std::pair{PromptMethod::Dual, 0.7}}) {
                const auto r = toy_gradcheck(m, f, seed, eps);
                out << method_label(m, f) << ": max_rel_error=" << r.max_rel_error << " over " << r.coordinates
                    << " coordinates (worst " << r.worst_tensor << '[' << r.worst_index << "])\n";
                worst = std::max(worst, r.max_rel_error);
            }
            const bool ok = worst < 1e-3;
            out << (ok ? "PASS" : "FAIL") << " max_rel_error=" << worst << " threshold=1e-3\n";
            return ok ? 0 : kExitFailure;
        }
        if (*rep) {
            const auto cfg = resolve_config(common);
            const auto grouping = load_grouping(grouping_path.empty()
                                                    ? resolve_output_dir(cfg) / "grouping.json"
                                                    : fs::path(grouping_path));
            const auto aggs = aggregate(read_results(results_path), grouping);
            const auto fmt = parse_report_format(format);
            if (report_out.empty()) {
                out << render_report(aggs, fmt, Json(cfg));
            } else {
                emit_report(aggs, fmt, report_out, Json(cfg));
                out << "wrote " << report_out << '\n';
            }
            return 0;
        }
        if (*gen) {
            auto cfg = resolve_config(common);
            cfg.validate();
            if (cfg.data.kind != "synthetic") throw ConfigError("gen-data needs synthetic data settings");
            LanguageGrouping grouping;
            auto [task_sets, pretrain_sets] = detail::synthetic_corpora(cfg.data, grouping);
            const fs::path dir = data_out.empty() ? resolve_output_dir(cfg) / "data" : fs::path(data_out);
            for (const auto& ds : task_sets) write_tsv_dataset(ds, dir / (ds.language() + ".tsv"));
            grouping.source_sets[cfg.source_set] = cfg.sources;
            save_grouping(grouping, dir / "grouping.json");
            out << "wrote " << task_sets.size() << " languages to " << dir.string() << '\n';
            return 0;
        }

        TrainLog log;
        std::ofstream log_file;
        auto open_log = [&](const Campaign& c) {
            fs::create_directories(c.output_dir);
            log_file.open(c.output_dir / "train_log.jsonl", std::ios::app);
            log = TrainLog(&log_file);
        };
        const auto cfg = resolve_config(common);

        if (*sw) {
            std::vector<std::string> methods = cfg.sweep_methods;
            if (methods.empty()) methods = {"SPT", "XPE", "DUAL-70"};
            CampaignResult all;
            std::optional<Campaign> last;
            for (const auto& m : methods) {
                auto variant = cfg;
                std::tie(variant.method, variant.dual_fraction) = parse_method_label(m);
                if (variant.method != PromptMethod::Dual) variant.dual_fraction = cfg.dual_fraction;
                auto c = prepare_campaign(variant);
                open_log(c);
                auto r = run_zero_shot(c, &log);
                log_file.close();
                all.results.insert(all.results.end(), r.results.begin(), r.results.end());
                all.failures.insert(all.failures.end(), r.failures.begin(), r.failures.end());
                last = std::move(c);
            }
            last->config = cfg;
            return print_campaign(out, *last, all, "sweep");
        }

        auto campaign = prepare_campaign(cfg);
        open_log(campaign);
        if (*pre) {
            out << "backbone " << (campaign.backbone_loaded ? "loaded" : "pretrained")
                << " checksum=" << hex64(campaign.backbone_checksum) << '\n';
            for (const auto& l : campaign.grouping.all) {
                out << "  " << l << (campaign.grouping.seen.count(l) ? " seen" : " unseen")
                    << " reference_accuracy=" << campaign.grouping.reference_accuracy[l] << '\n';
            }
            return 0;
        }
        if (*zs) return print_campaign(out, campaign, run_zero_shot(campaign, &log), "zero-shot");
        if (*seq) return print_campaign(out, campaign, run_sequential(campaign, &log), "sequential");

        auto model = make_prompt_model(campaign, seed);
        if (*ts) {
            SeededRng rng = SeededRng(seed).fork(3);
            const auto phase = train_source(model, detail::source_datasets(campaign), cfg.source_plan, rng, &log, seed);
            const fs::path path = state_out.empty() ? default_state_path(campaign, seed) : fs::path(state_out);
            save_model_state(model, path, {{"seed", seed}, {"method", cfg.label()}, {"steps", phase.steps},
                                           {"source_set", cfg.source_set}});
            out << "steps=" << phase.steps << " best_val_acc=" << phase.best_val_acc << " state=" << path.string()
                << '\n';
            return 0;
        }
        if (*at) {
            const fs::path in = state_in.empty() ? default_state_path(campaign, seed) : fs::path(state_in);
            const auto meta = load_model_state(model, in);
            SeededRng rng = SeededRng(seed).fork(fnv1a(target));
            const auto phase = adapt_target(model, campaign.dataset(target), cfg.target_plan, rng, cfg.sources, &log,
                                            seed);
            const fs::path path = state_out.empty() ? default_state_path(campaign, seed, target) : fs::path(state_out);
            const std::size_t prior = meta.value("steps", std::size_t{0});
            save_model_state(model, path, {{"seed", seed}, {"method", cfg.label()}, {"steps", prior + phase.steps},
                                           {"source_set", cfg.source_set}, {"target", target}});
            out << "steps=" << phase.steps << " best_val_acc=" << phase.best_val_acc << " state=" << path.string()
                << '\n';
            return 0;
        }
        if (*ex) {
            const auto meta = load_model_state(model, state_in);
            CacheMetadata cm;
            cm.source_set = cfg.source_set;
            cm.seed = seed;
            cm.creation_step = meta.value("steps", std::uint64_t{0});
            const auto cached = export_cached_prompt(model.prompt, cm, cache_path);
            out << "wrote " << cache_path << " L=" << cached.length() << " d=" << cached.width()
                << " checksum=" << hex64(cached.checksum()) << '\n';
            return 0;
        }
        if (*ev) {
            load_model_state(model, state_in);
            const auto cached = load_cached_prompt(cache_path, cfg.backbone);
            const auto e = evaluate_detailed(cfg.backbone, campaign.stack, model.head, cached,
                                             campaign.dataset(language));
            out << "language=" << language << " accuracy=" << e.accuracy << " (" << e.correct << '/' << e.total
                << ")\n";
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    err << "error: no subcommand handled\n";
    return kExitUsage;
}

}  // namespace xpe::cli
