#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "xpe/cli.hpp"

using namespace xpe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("xpe_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
    ExperimentConfig c;
    c.backbone.d_model = 16;
    c.backbone.n_layers = 1;
    c.backbone.n_heads = 2;
    c.backbone.d_ffn = 32;
    c.backbone.max_positions = 16;
    c.backbone.n_classes = 3;
    c.data.task.n_classes = 3;
    c.data.task.n_concepts = 24;
    c.data.task.keywords_per_class = 4;
    c.data.task.min_length = 4;
    c.data.task.max_length = 6;
    c.backbone.vocab_size = c.data.task.vocab_size();
    c.data.n_seen = 3;
    c.data.n_unseen = 2;
    c.data.n_per_class = 20;
    c.data.pretrain_per_class = 30;
    c.pretrain.steps = 80;
    c.prompt_length = 4;
    c.bottleneck = 4;
    c.source_set = "S0-S1";
    c.sources = {"S0", "S1"};
    c.seeds = {1, 2};
    c.source_plan.max_steps = 24;
    c.source_plan.batch_size = 8;
    c.target_plan.max_steps = 12;
    c.target_plan.batch_size = 8;
    c.output_dir = out.string();
    return c;
}

RunResult rr(const std::string& target, std::uint64_t seed, double acc,
             Supervision sup = Supervision::ZeroShot, const std::string& source_set = "src") {
    RunResult r;
    r.method = "XPE";
    r.source_set = source_set;
    r.target = target;
    r.seed = seed;
    r.supervision = sup;
    r.accuracy = acc;
    return r;
}

LanguageGrouping fixture_grouping() {
    LanguageGrouping g;
    g.all = {"S0", "S1", "U0", "U1"};
    g.seen = {"S0", "S1"};
    g.reference_accuracy = {{"S0", 0.9}, {"S1", 0.8}, {"U0", 0.3}, {"U1", 0.7}};
    g.source_sets["src"] = {"S0"};
    return g;
}

const GroupAggregate& find(const std::vector<GroupAggregate>& aggs, const std::string& group) {
    for (const auto& a : aggs)
        if (a.group == group) return a;
    throw std::runtime_error("missing group " + group);
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "xpe");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(int(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

}  // namespace

TEST(MethodLabel, RoundTrip) {
    EXPECT_EQ(method_label(PromptMethod::Spt, 0.7), "SPT");
    EXPECT_EQ(method_label(PromptMethod::Xpe, 0.7), "XPE");
    EXPECT_EQ(method_label(PromptMethod::Dual, 0.7), "DUAL-70");
    EXPECT_EQ(method_label(PromptMethod::Dual, 0.3), "DUAL-30");
    const auto [m, f] = parse_method_label("DUAL-30");
    EXPECT_EQ(m, PromptMethod::Dual);
    EXPECT_EQ(f, 0.3);
    EXPECT_THROW(parse_method_label("XPE-30"), ConfigError);
    EXPECT_THROW(parse_method_label("DUAL-x"), ConfigError);
    EXPECT_THROW(parse_method_label("LORA"), ConfigError);
}

TEST(Config, StrictKeysAndValidation) {
    EXPECT_THROW(Json({{"bogus", 1}}).get<ExperimentConfig>(), ConfigError);
    auto c = tiny_config("/tmp/x");
    EXPECT_NO_THROW(c.validate());
    c.sources.clear();
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config("/tmp/x");
    c.backbone.vocab_size = 10;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config("/tmp/x");
    c.prompt_length = 20;  // 1 + 20 + 6 > 16 positions
    EXPECT_THROW(c.validate(), ConfigError);
    // JSON round trip.
    const auto d = Json(tiny_config("/tmp/x")).get<ExperimentConfig>();
    EXPECT_EQ(Json(d), Json(tiny_config("/tmp/x")));
}

TEST(Config, OutputRootPrefixesRelativeDirs) {
    ExperimentConfig c;
    c.output_dir = "runs/a";
    ::setenv("XPE_OUTPUT_ROOT", "/tmp/root", 1);
    EXPECT_EQ(resolve_output_dir(c), fs::path("/tmp/root/runs/a"));
    c.output_dir = "/abs/b";
    EXPECT_EQ(resolve_output_dir(c), fs::path("/abs/b"));
    ::unsetenv("XPE_OUTPUT_ROOT");
    c.output_dir = "runs/a";
    EXPECT_EQ(resolve_output_dir(c), fs::path("runs/a"));
}

TEST(Seeds, PaperDefaultCounts) {
    EXPECT_EQ(kDefaultZeroShotSeeds, 10u);
    EXPECT_EQ(kDefaultSequentialSeeds, 6u);
    ExperimentConfig c;
    EXPECT_EQ(c.seeds_or(kDefaultZeroShotSeeds).size(), 10u);
    EXPECT_EQ(c.seeds_or(kDefaultSequentialSeeds).size(), 6u);
    c.seeds = {7};
    EXPECT_EQ(c.seeds_or(kDefaultZeroShotSeeds), std::vector<std::uint64_t>{7});
}

TEST(Evaluate, ConstantLogitsTieGoesToLowestIndex) {
    const auto w = fixtures::tiny_world();
    auto model = fixtures::tiny_model(w, PromptMethod::Spt);
    for (const auto& t : {model.head.out_weight, model.head.out_bias})
        std::fill(t->values().begin(), t->values().end(), 0.0f);
    const auto dir = scratch("tie");
    const auto cached = export_cached_prompt(model.prompt, {}, dir / "p.cache");
    Dataset zeros("z", 3), twos("t", 3);
    for (const auto& e : w.datasets[0].test()) {
        zeros.add({e.tokens, 0, "", Split::Test});
        twos.add({e.tokens, 2, "", Split::Test});
    }
    EXPECT_EQ(evaluate(w.config, model.stack, model.head, cached, zeros), 1.0);
    EXPECT_EQ(evaluate(w.config, model.stack, model.head, cached, twos), 0.0);
    fs::remove_all(dir);
}

TEST(Evaluate, MatchesPerExampleLoopAndIsStable) {
    const auto w = fixtures::tiny_world(3, 60);
    auto model = fixtures::tiny_model(w, PromptMethod::Dual, 3);
    for (const auto& t : model.trainable_tensors()) {
        SeededRng rng(11);
        fill_normal(*t, rng, 0.3);
    }
    const auto dir = scratch("loop");
    const auto cached = export_cached_prompt(model.prompt, {}, dir / "p.cache");
    const auto& ds = w.datasets[1];
    const std::size_t enc_calls = model.prompt.encoder->forward_count();
    const auto e = evaluate_detailed(w.config, model.stack, model.head, cached, ds, 7);
    EXPECT_EQ(model.prompt.encoder->forward_count(), enc_calls);
    // Oracle: one unbatched forward per example, argmax by hand.
    std::size_t correct = 0;
    for (const auto& ex : ds.test()) {
        TokenBatch b;
        b.batch = 1;
        b.length = ex.tokens.size();
        b.tokens = ex.tokens;
        b.mask.assign(ex.tokens.size(), 1);
        b.labels = {ex.label};
        Tape tape(false);
        auto logits = classify(tape, w.config, model.stack, model.head, cached.matrix(), b);
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if ((*logits)[k] > (*logits)[best]) best = k;
        correct += best == ex.label;
    }
    EXPECT_EQ(e.correct, correct);
    EXPECT_EQ(e.total, ds.size(Split::Test));
    EXPECT_EQ(e.accuracy, double(correct) / double(e.total));
    // Duplicated dataset: same accuracy.
    Dataset twice("d", 3);
    for (int r = 0; r < 2; ++r)
        for (const auto& ex : ds.test()) twice.add(ex);
    EXPECT_EQ(evaluate(w.config, model.stack, model.head, cached, twice), e.accuracy);
    fs::remove_all(dir);
}

TEST(Evaluate, WidthMismatchIsCompatibilityError) {
    const auto w = fixtures::tiny_world();
    auto model = fixtures::tiny_model(w, PromptMethod::Xpe);
    SeededRng rng(1);
    auto wide = make_prompt_components<float>(PromptMethod::Spt, 4, 0.0, 24, 4, rng);
    const auto dir = scratch("width");
    const auto cached = export_cached_prompt(wide, {}, dir / "p.cache");
    EXPECT_THROW(evaluate(w.config, model.stack, model.head, cached, w.datasets[0]), CompatibilityError);
    EXPECT_THROW(load_cached_prompt(dir / "p.cache", w.config), CompatibilityError);
    fs::remove_all(dir);
}

TEST(Aggregate, SimpleMeans) {
    auto g = fixture_grouping();
    const auto one = aggregate({rr("U0", 1, 0.37)}, g);
    EXPECT_EQ(find(one, "Unseen").mean, 0.37);
    EXPECT_EQ(find(one, "Unseen").std, 0.0);
    const auto two = aggregate({rr("U0", 1, 0.2), rr("U1", 1, 0.4)}, g);
    // The correctly rounded mean of the doubles 0.2 and 0.4 is 0.30000000000000004.
    EXPECT_DOUBLE_EQ(find(two, "Unseen").mean, 0.3);
    EXPECT_TRUE(find(two, "Seen-wo-sources").empty());
    EXPECT_THROW(aggregate({rr("XX", 1, 0.5)}, g), AggregationError);
    EXPECT_THROW(aggregate({rr("U0", 1, 0.5, Supervision::ZeroShot, "other")}, g), AggregationError);
    EXPECT_THROW(aggregate({rr("U0", 1, 0.5), rr("U0", 1, 0.6)}, g), AggregationError);
}

TEST(Aggregate, HandComputedThreeSeedFixture) {
    const auto g = fixture_grouping();
    const std::vector<RunResult> results{
        rr("S0", 1, 0.9), rr("S0", 2, 0.8), rr("S0", 3, 0.85),  // source: excluded from the wo groups
        rr("S1", 1, 0.5), rr("S1", 2, 0.6), rr("S1", 3, 0.7),
        rr("U0", 1, 0.2), rr("U0", 2, 0.3), rr("U0", 3, 0.1),
        rr("U1", 1, 0.4), rr("U1", 2, 0.5), rr("U1", 3, 0.3)};
    const auto aggs = aggregate(results, g);
    ASSERT_EQ(aggs.size(), 4u);

    // Spreadsheet-style: per-seed row means, then mean and STDEV.S down the column.
    const double all1 = (0.5 + 0.2 + 0.4) / 3, all2 = (0.6 + 0.3 + 0.5) / 3, all3 = (0.7 + 0.1 + 0.3) / 3;
    const auto& all = find(aggs, "All-wo-sources");
    EXPECT_EQ(all.members, (std::vector<std::string>{"S1", "U0", "U1"}));
    ASSERT_EQ(all.per_seed.size(), 3u);
    EXPECT_EQ(all.per_seed[0].second, all1);
    EXPECT_EQ(all.per_seed[1].second, all2);
    EXPECT_EQ(all.per_seed[2].second, all3);
    const double all_mean = (all1 + all2 + all3) / 3;
    EXPECT_EQ(all.mean, all_mean);
    EXPECT_NEAR(all.mean, 0.4, 1e-15);
    EXPECT_NEAR(all.std, std::sqrt(1.0 / 300.0), 1e-15);

    const auto& unseen = find(aggs, "Unseen");
    EXPECT_EQ(unseen.per_seed[0].second, (0.2 + 0.4) / 2);
    EXPECT_EQ(unseen.per_seed[1].second, (0.3 + 0.5) / 2);
    EXPECT_EQ(unseen.per_seed[2].second, (0.1 + 0.3) / 2);
    EXPECT_NEAR(unseen.mean, 0.3, 1e-15);
    EXPECT_NEAR(unseen.std, 0.1, 1e-15);

    const auto& seen = find(aggs, "Seen-wo-sources");
    EXPECT_EQ(seen.members, std::vector<std::string>{"S1"});
    EXPECT_EQ(seen.mean, (0.5 + 0.6 + 0.7) / 3);
    EXPECT_NEAR(seen.std, 0.1, 1e-15);

    const auto& low = find(aggs, "LowPerforming");
    EXPECT_EQ(low.members, std::vector<std::string>{"U0"});
    EXPECT_EQ(low.mean, (0.2 + 0.3 + 0.1) / 3);
    EXPECT_NEAR(low.std, 0.1, 1e-15);
}

TEST(Aggregate, PermutationInvariant) {
    const auto g = fixture_grouping();
    std::vector<RunResult> results;
    SeededRng rng(2);
    for (std::uint64_t s = 1; s <= 5; ++s)
        for (const auto& l : g.all) results.push_back(rr(l, s, rng.uniform()));
    const auto base = Json(aggregate(results, g)).dump();
    std::mt19937 eng(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::shuffle(results.begin(), results.end(), eng);
        EXPECT_EQ(Json(aggregate(results, g)).dump(), base);
    }
}

TEST(Aggregate, SampleStdOracle) {
    EXPECT_EQ(sample_std({}), 0.0);
    EXPECT_EQ(sample_std({0.4}), 0.0);
    EXPECT_NEAR(sample_std({2, 4, 4, 4, 5, 5, 7, 9}), std::sqrt(32.0 / 7.0), 1e-14);
}

TEST(Report, CsvRoundTripAndFormats) {
    const auto g = fixture_grouping();
    const std::vector<RunResult> results{rr("S1", 1, 0.419), rr("U1", 1, 0.7), rr("S1", 2, 1.0 / 3),
                                         rr("U1", 2, 0.2)};
    auto gg = g;
    gg.reference_accuracy = {{"U1", 0.9}};  // LowPerforming is empty
    const auto aggs = aggregate(results, gg);
    const Json cfg{{"note", "fixture"}};
    const auto csv = render_report(aggs, ReportFormat::Csv, cfg);
    EXPECT_EQ(csv.rfind("# config: {\"note\":\"fixture\"}", 0), 0u);
    const auto rows = parse_report_csv(csv);
    ASSERT_EQ(rows.size(), aggs.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].group, aggs[i].group);
        EXPECT_EQ(rows[i].n_seeds, aggs[i].per_seed.size());
        if (aggs[i].empty()) {
            EXPECT_FALSE(rows[i].mean.has_value());
        } else {
            EXPECT_EQ(*rows[i].mean, aggs[i].mean);
            EXPECT_EQ(*rows[i].std, aggs[i].std);
        }
    }
    const auto md = render_report(aggs, ReportFormat::Markdown, cfg);
    for (const auto& name : kTargetGroupNames) EXPECT_NE(md.find("| " + name + " |"), std::string::npos) << name;
    EXPECT_NE(md.find("| LowPerforming | -- |"), std::string::npos);
    // Seen-wo-sources: seeds 0.419 and 0.333..., mean 37.6%.
    EXPECT_NE(md.find("| Seen-wo-sources | 37.6 |"), std::string::npos) << md;
    const auto js = Json::parse(render_report(aggs, ReportFormat::Json, cfg));
    EXPECT_EQ(js["config"], cfg);
    EXPECT_EQ(js["aggregates"].size(), 4u);
    EXPECT_THROW(render_report({}, ReportFormat::Csv, cfg), AggregationError);
    EXPECT_THROW(parse_report_format("xlsx"), ConfigError);
    EXPECT_THROW(emit_report(aggs, ReportFormat::Csv, "/proc/nonexistent/dir/x.csv", cfg), std::exception);
}

TEST(Report, PercentCellOneDecimal) {
    GroupAggregate a;
    a.per_seed = {{1, 0.419}};
    a.mean = 0.419;
    EXPECT_EQ(percent_cell(&a), "41.9");
    a.mean = 0.76349;
    EXPECT_EQ(percent_cell(&a), "76.3");
    EXPECT_EQ(percent_cell(nullptr), "--");
    EXPECT_EQ(percent_cell(&(const GroupAggregate&)GroupAggregate{}), "--");
}

TEST(Results, JsonlRoundTrip) {
    const auto dir = scratch("results");
    const std::vector<RunResult> rs{rr("U0", 1, 0.25, Supervision::Sequential), rr("S1", 2, 1.0 / 3)};
    write_results(rs, dir / "r.jsonl");
    const auto back = read_results(dir / "r.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].accuracy, 1.0 / 3);
    EXPECT_EQ(back[0].supervision, Supervision::Sequential);
    std::ofstream(dir / "bad.jsonl") << "{\"method\": 1}\n";
    EXPECT_THROW(read_results(dir / "bad.jsonl"), FormatError);
    fs::remove_all(dir);
}

TEST(Cli, UsageErrorsExitTwo) {
    std::string out, err;
    EXPECT_EQ(run_cli({}, &out, &err), 2);
    EXPECT_EQ(run_cli({"frobnicate"}, &out, &err), 2);
    EXPECT_EQ(run_cli({"params", "--no-such-flag"}, &out, &err), 2);
    EXPECT_EQ(run_cli({"adapt-target"}, &out, &err), 2);  // --target is required
    EXPECT_EQ(run_cli({"params", "--config", "/nonexistent.json"}, &out, &err), 1);
    EXPECT_NE(err.find("error:"), std::string::npos);
}

TEST(Cli, ParamsReferenceShape) {
    std::string out;
    ASSERT_EQ(run_cli({"params", "--config", XPE_SOURCE_DIR "/configs/reference.json"}, &out), 0);
    EXPECT_NE(out.find("trainable=1,602,823\n"), std::string::npos) << out;
    EXPECT_NE(out.find("fraction=0.002914\n"), std::string::npos) << out;
}

TEST(Cli, GradcheckPasses) {
    std::string out;
    EXPECT_EQ(run_cli({"gradcheck"}, &out), 0) << out;
    EXPECT_NE(out.find("PASS"), std::string::npos);
}

TEST(Campaign, ZeroShotCountsPurityAndDeterminism) {
    const auto dir = scratch("zs");
    std::ostringstream sink;
    TrainLog log(&sink);
    const auto c = prepare_campaign(tiny_config(dir / "a"), &log);
    EXPECT_FALSE(c.backbone_loaded);
    ASSERT_EQ(c.targets(), (std::vector<std::string>{"S2", "U0", "U1"}));
    const auto r = run_zero_shot(c, &log);
    EXPECT_TRUE(r.failures.empty()) << r.failures[0].message;
    EXPECT_EQ(r.results.size(), 2u * 3u);
    EXPECT_EQ(r.source_phases, 2u);
    for (const auto& x : r.results) {
        EXPECT_EQ(x.total, c.dataset(x.target).size(Split::Test));
        EXPECT_EQ(x.accuracy, double(x.correct) / double(x.total));
    }
    // Purity: target train/dev splits were never read.
    for (const auto& t : c.targets()) {
        EXPECT_EQ(c.dataset(t).access_log().train, 0u) << t;
        EXPECT_EQ(c.dataset(t).access_log().dev, 0u) << t;
        EXPECT_GT(c.dataset(t).access_log().test, 0u) << t;
    }
    std::size_t audits = 0;
    for (const auto& rec : log.records()) audits += rec.value("event", "") == "zero_shot_audit";
    EXPECT_EQ(audits, 2u);

    // A fresh directory reproduces the accuracies bit for bit; the same
    // directory reuses the saved backbone.
    const auto again = prepare_campaign(tiny_config(dir / "b"));
    EXPECT_EQ(again.backbone_checksum, c.backbone_checksum);
    const auto r2 = run_zero_shot(again);
    ASSERT_EQ(r2.results.size(), r.results.size());
    for (std::size_t i = 0; i < r.results.size(); ++i) EXPECT_EQ(r2.results[i].accuracy, r.results[i].accuracy);
    const auto reused = prepare_campaign(tiny_config(dir / "a"));
    EXPECT_TRUE(reused.backbone_loaded);
    EXPECT_EQ(reused.backbone_checksum, c.backbone_checksum);
    EXPECT_EQ(reused.grouping.reference_accuracy, c.grouping.reference_accuracy);

    const auto csv = write_campaign_outputs(c, r, "zero-shot");
    const auto csv2 = write_campaign_outputs(again, r2, "zero-shot");
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    // Reports echo output_dir, so compare after removing the config line.
    auto body = [&](const fs::path& p) {
        auto s = slurp(p);
        return s.substr(s.find('\n'));
    };
    EXPECT_EQ(body(csv), body(csv2));
    fs::remove_all(dir);
}

TEST(Campaign, FailingSeedIsIsolated) {
    const auto dir = scratch("fail");
    auto c = prepare_campaign(tiny_config(dir));
    c.config.source_plan.max_steps = 0;
    std::ostringstream sink;
    TrainLog log(&sink);
    const auto r = run_zero_shot(c, &log);
    EXPECT_TRUE(r.results.empty());
    ASSERT_EQ(r.failures.size(), 2u);
    EXPECT_EQ(r.failures[0].seed, 1u);
    EXPECT_EQ(r.failures[1].seed, 2u);
    EXPECT_NE(r.failures[0].message.find("phase plan"), std::string::npos);
    std::size_t logged = 0;
    for (const auto& rec : log.records()) logged += rec.value("event", "") == "seed_failed";
    EXPECT_EQ(logged, 2u);
    c.config.sources = {"S0", "nope"};
    EXPECT_THROW(run_zero_shot(c), ConfigError);
    fs::remove_all(dir);
}

TEST(Campaign, SequentialSharesSourcePhaseAndAdaptsEachTarget) {
    const auto dir = scratch("seq");
    auto cfg = tiny_config(dir);
    cfg.targets = {"S2", "U1"};
    const auto c = prepare_campaign(cfg);
    std::ostringstream sink;
    TrainLog log(&sink);
    const auto r = run_sequential(c, &log);
    EXPECT_TRUE(r.failures.empty());
    EXPECT_EQ(r.source_phases, 2u);
    std::size_t source_starts = 0, target_starts = 0, done = 0;
    for (const auto& rec : log.records()) {
        if (rec.value("event", "") == "phase_start") {
            (rec["phase"] == "source" ? source_starts : target_starts)++;
        }
        done += rec.value("event", "") == "source_phase_done";
    }
    EXPECT_EQ(source_starts, 2u);
    EXPECT_EQ(done, 2u);
    EXPECT_EQ(target_starts, 2u * 2u);
    std::size_t seq = 0, zs = 0;
    for (const auto& x : r.results) (x.supervision == Supervision::Sequential ? seq : zs)++;
    EXPECT_EQ(seq, 4u);
    EXPECT_EQ(zs, 4u);
    for (const auto& x : r.results) {
        if (x.supervision == Supervision::Sequential) {
            EXPECT_GT(x.steps, cfg.source_plan.max_steps / 2);
        }
    }
    fs::remove_all(dir);
}

TEST(Campaign, AdaptationHelpsAlignedTarget) {
    // Paired comparison on an aligned (seen) target over six seeds.
    const auto dir = scratch("paired");
    auto cfg = tiny_config(dir);
    cfg.seeds = {1, 2, 3, 4, 5, 6};
    cfg.targets = {"S2"};
    cfg.source_plan.max_steps = 40;
    cfg.target_plan.max_steps = 60;
    const auto c = prepare_campaign(cfg);
    const auto r = run_sequential(c);
    ASSERT_EQ(r.results.size(), 12u);
    std::map<std::uint64_t, std::pair<double, double>> paired;
    for (const auto& x : r.results) {
        (x.supervision == Supervision::ZeroShot ? paired[x.seed].first : paired[x.seed].second) = x.accuracy;
    }
    int wins = 0;
    for (const auto& [seed, p] : paired) wins += p.second >= p.first;
    EXPECT_GE(wins, 4);
    fs::remove_all(dir);
}

TEST(Cli, RunZeroShotThenReport) {
    const auto dir = scratch("cli");
    const auto cfg_path = dir / "tiny.json";
    auto cfg = tiny_config(dir / "out");
    cfg.seeds = {3};
    std::ofstream(cfg_path) << Json(cfg).dump(2);
    std::string out, err;
    ASSERT_EQ(run_cli({"run-zs", "-c", cfg_path.string()}, &out, &err), 0) << err;
    EXPECT_TRUE(fs::exists(dir / "out" / "zero-shot-report.csv"));
    EXPECT_TRUE(fs::exists(dir / "out" / "train_log.jsonl"));
    ASSERT_EQ(run_cli({"report", "-c", cfg_path.string(), "--results",
                       (dir / "out" / "zero-shot-results.jsonl").string(), "--format", "markdown"},
                      &out, &err),
              0)
        << err;
    for (const auto& g : kTargetGroupNames) EXPECT_NE(out.find("| " + g + " |"), std::string::npos) << g;

    // Step-wise path: train-source, export-prompt, eval.
    ASSERT_EQ(run_cli({"train-source", "-c", cfg_path.string(), "--seed", "3"}, &out, &err), 0) << err;
    const auto state = dir / "out" / "state" / "XPE-S0-S1-seed3.bin";
    ASSERT_TRUE(fs::exists(state));
    ASSERT_EQ(run_cli({"adapt-target", "-c", cfg_path.string(), "--seed", "3", "--target", "U0"}, &out, &err), 0)
        << err;
    ASSERT_EQ(run_cli({"export-prompt", "-c", cfg_path.string(), "--seed", "3", "--state-in", state.string(),
                       "--out", (dir / "p.cache").string()},
                      &out, &err),
              0)
        << err;
    ASSERT_EQ(run_cli({"eval", "-c", cfg_path.string(), "--state-in", state.string(), "--cache",
                       (dir / "p.cache").string(), "--language", "U0"},
                      &out, &err),
              0)
        << err;
    // Same seed and same source phase as the campaign: identical accuracy.
    const auto results = read_results(dir / "out" / "zero-shot-results.jsonl");
    for (const auto& x : results) {
        if (x.target != "U0") continue;
        std::ostringstream expect;
        expect << "language=U0 accuracy=" << x.accuracy << " (";
        EXPECT_EQ(out.rfind(expect.str(), 0), 0u) << out;
    }
    ASSERT_EQ(run_cli({"gen-data", "-c", cfg_path.string(), "--out", (dir / "tsv").string()}, &out, &err), 0);
    EXPECT_TRUE(fs::exists(dir / "tsv" / "U1.tsv"));
    EXPECT_TRUE(fs::exists(dir / "tsv" / "grouping.json"));
    fs::remove_all(dir);
}
