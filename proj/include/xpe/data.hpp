#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xpe/serialization.hpp"
#include "xpe/tensor.hpp"

namespace xpe {

enum class Split { Train, Dev, Test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Dev: return "dev";
        case Split::Test: return "test";
    }
    return "?";
}

struct LabeledExample {
    std::vector<int> tokens;
    int label = 0;
    std::string language;
    Split split = Split::Train;
};

/// Per-split read counters; the harness uses them to prove that zero-shot
/// runs never touch target supervision.
struct SplitAccessLog {
    std::size_t train = 0;
    std::size_t dev = 0;
    std::size_t test = 0;
};

/// All examples of one language, partitioned into train/dev/test.
class Dataset {
public:
    Dataset() = default;
    Dataset(std::string language, std::size_t n_classes, std::vector<std::string> label_names = {})
        : language_(std::move(language)), n_classes_(n_classes), label_names_(std::move(label_names)) {}

    const std::string& language() const { return language_; }
    std::size_t n_classes() const { return n_classes_; }
    const std::vector<std::string>& label_names() const { return label_names_; }
    std::optional<bool> seen() const { return seen_; }
    void set_seen(bool seen) { seen_ = seen; }

    void add(LabeledExample ex) {
        if (ex.label < 0 || std::size_t(ex.label) >= n_classes_) {
            throw IndexError("dataset '" + language_ + "': label " + std::to_string(ex.label) +
                             " outside [0," + std::to_string(n_classes_) + ")");
        }
        ex.language = language_;
        bucket(ex.split).push_back(std::move(ex));
    }

    /// Audited access.
    const std::vector<LabeledExample>& split(Split s) const {
        switch (s) {
            case Split::Train: ++access_->train; break;
            case Split::Dev: ++access_->dev; break;
            case Split::Test: ++access_->test; break;
        }
        return bucket(s);
    }
    const std::vector<LabeledExample>& train() const { return split(Split::Train); }
    const std::vector<LabeledExample>& dev() const { return split(Split::Dev); }
    const std::vector<LabeledExample>& test() const { return split(Split::Test); }

    std::size_t size() const { return train_.size() + dev_.size() + test_.size(); }
    std::size_t size(Split s) const { return bucket(s).size(); }
    std::size_t max_length() const {
        std::size_t m = 0;
        for (const auto* v : {&train_, &dev_, &test_})
            for (const auto& e : *v) m = std::max(m, e.tokens.size());
        return m;
    }

    const SplitAccessLog& access_log() const { return *access_; }
    void reset_access_log() const { *access_ = {}; }

private:
    const std::vector<LabeledExample>& bucket(Split s) const {
        switch (s) {
            case Split::Train: return train_;
            case Split::Dev: return dev_;
            case Split::Test: return test_;
        }
        return test_;
    }
    std::vector<LabeledExample>& bucket(Split s) {
        return const_cast<std::vector<LabeledExample>&>(std::as_const(*this).bucket(s));
    }

    std::string language_;
    std::size_t n_classes_ = 0;
    std::vector<std::string> label_names_;
    std::optional<bool> seen_;
    std::vector<LabeledExample> train_, dev_, test_;
    std::shared_ptr<SplitAccessLog> access_ = std::make_shared<SplitAccessLog>();
};

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// Token id layout: 0 = PAD, 1 = CLS, then the seen region, then the unseen
/// region, each holding one id per latent concept.
inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kFirstContentToken = 2;

inline std::size_t synthetic_vocab_size(std::size_t n_concepts) { return 2 + 2 * n_concepts; }

/// Class-conditional concept distributions. Each class owns a disjoint set of
/// keyword concepts; a token is a class keyword with probability
/// keyword_prob and a uniform background concept otherwise.
struct TopicTask {
    std::size_t n_classes = 7;
    std::size_t n_concepts = 64;
    std::size_t keywords_per_class = 6;
    double keyword_prob = 0.5;
    std::size_t min_length = 12;
    std::size_t max_length = 16;
    double tv_floor = 0.2;
    std::vector<std::vector<double>> class_distributions;

    std::size_t vocab_size() const { return synthetic_vocab_size(n_concepts); }
};

inline void to_json(Json& j, const TopicTask& t) {
    j = Json{{"n_classes", t.n_classes},   {"n_concepts", t.n_concepts},
             {"keywords_per_class", t.keywords_per_class}, {"keyword_prob", t.keyword_prob},
             {"min_length", t.min_length}, {"max_length", t.max_length},
             {"tv_floor", t.tv_floor}};
}

inline void from_json(const Json& j, TopicTask& t) {
    t.n_classes = j.value("n_classes", t.n_classes);
    t.n_concepts = j.value("n_concepts", t.n_concepts);
    t.keywords_per_class = j.value("keywords_per_class", t.keywords_per_class);
    t.keyword_prob = j.value("keyword_prob", t.keyword_prob);
    t.min_length = j.value("min_length", t.min_length);
    t.max_length = j.value("max_length", t.max_length);
    t.tv_floor = j.value("tv_floor", t.tv_floor);
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

/// Fills class_distributions from the task shape and `seed`.
inline TopicTask make_topic_task(TopicTask task, std::uint64_t seed) {
    if (task.n_classes < 2) throw ConfigError("topic task needs at least two classes");
    if (task.keywords_per_class == 0 || task.n_classes * task.keywords_per_class > task.n_concepts) {
        throw ConfigError("topic task: " + std::to_string(task.n_classes) + " classes x " +
                          std::to_string(task.keywords_per_class) + " keywords do not fit in " +
                          std::to_string(task.n_concepts) + " concepts");
    }
    if (task.min_length == 0 || task.min_length > task.max_length) {
        throw ConfigError("topic task: bad text length range");
    }
    SeededRng rng(seed);
    std::vector<std::size_t> concepts(task.n_concepts);
    for (std::size_t i = 0; i < concepts.size(); ++i) concepts[i] = i;
    rng.shuffle(concepts);
    task.class_distributions.assign(task.n_classes, std::vector<double>(task.n_concepts,
                                                                         (1.0 - task.keyword_prob) /
                                                                             double(task.n_concepts)));
    for (std::size_t k = 0; k < task.n_classes; ++k) {
        for (std::size_t w = 0; w < task.keywords_per_class; ++w) {
            task.class_distributions[k][concepts[k * task.keywords_per_class + w]] +=
                task.keyword_prob / double(task.keywords_per_class);
        }
    }
    for (std::size_t a = 0; a < task.n_classes; ++a) {
        for (std::size_t b = a + 1; b < task.n_classes; ++b) {
            const double tv = total_variation(task.class_distributions[a], task.class_distributions[b]);
            if (tv < task.tv_floor) {
                throw ConfigError("topic task: classes " + std::to_string(a) + " and " + std::to_string(b) +
                                  " are only " + std::to_string(tv) + " apart in total variation");
            }
        }
    }
    return task;
}

struct SyntheticLanguage {
    std::string id;
    std::vector<int> cipher;               // concept -> slot, a permutation
    std::vector<std::uint8_t> seen_region;  // per concept: 1 = id from the seen region
    double alignment = 1.0;
    bool seen = true;
    int family = 0;

    int token_for(std::size_t concept_id) const {
        const int slot = cipher[concept_id];
        const int region = seen_region[concept_id] ? 0 : int(cipher.size());
        return kFirstContentToken + region + slot;
    }
};

/// Discrete distribution of alignment values for unseen languages; seen
/// languages draw uniformly from [seen_min, seen_max].
struct AlignmentProfile {
    double seen_min = 0.95;
    double seen_max = 1.0;
    std::vector<double> unseen_values{0.0, 0.3, 0.6, 0.9};
    std::vector<double> unseen_weights{1.0, 1.0, 1.0, 1.0};
    // Fraction of concepts whose slot differs from the family cipher.
    double cipher_drift = 0.1;
};

inline void to_json(Json& j, const AlignmentProfile& p) {
    j = Json{{"seen_min", p.seen_min},           {"seen_max", p.seen_max},
             {"unseen_values", p.unseen_values}, {"unseen_weights", p.unseen_weights},
             {"cipher_drift", p.cipher_drift}};
}

inline void from_json(const Json& j, AlignmentProfile& p) {
    p.seen_min = j.value("seen_min", p.seen_min);
    p.seen_max = j.value("seen_max", p.seen_max);
    p.unseen_values = j.value("unseen_values", p.unseen_values);
    p.unseen_weights = j.value("unseen_weights", p.unseen_weights);
    p.cipher_drift = j.value("cipher_drift", p.cipher_drift);
}

inline double sample_profile(const AlignmentProfile& p, SeededRng& rng) {
    if (p.unseen_values.empty() || p.unseen_values.size() != p.unseen_weights.size()) {
        throw ConfigError("alignment profile: values and weights must be nonempty and equal length");
    }
    double total = 0.0;
    for (auto w : p.unseen_weights) total += w;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < p.unseen_values.size(); ++i) {
        if (u < p.unseen_weights[i]) return p.unseen_values[i];
        u -= p.unseen_weights[i];
    }
    return p.unseen_values.back();
}

/// Seen languages are named S0.., unseen ones U0..; all share one family
/// cipher up to `cipher_drift` random transpositions.
inline std::vector<SyntheticLanguage> generate_language_family(std::uint64_t seed, std::size_t n_seen,
                                                               std::size_t n_unseen,
                                                               const AlignmentProfile& profile,
                                                               std::size_t n_concepts, int family = 0) {
    if (n_seen + n_unseen < 2) throw ConfigError("language family needs at least two languages");
    if (n_concepts < 2) throw ConfigError("vocabulary too small: need at least two concepts per region");
    if (!(profile.seen_min <= profile.seen_max && profile.seen_min >= 0.0 && profile.seen_max <= 1.0)) {
        throw ConfigError("alignment profile: bad seen range");
    }
    SeededRng rng(seed);
    std::vector<int> base(n_concepts);
    for (std::size_t i = 0; i < n_concepts; ++i) base[i] = int(i);
    rng.shuffle(base);

    std::vector<SyntheticLanguage> out;
    for (std::size_t i = 0; i < n_seen + n_unseen; ++i) {
        SyntheticLanguage lang;
        lang.seen = i < n_seen;
        lang.id = lang.seen ? "S" + std::to_string(i) : "U" + std::to_string(i - n_seen);
        lang.family = family;
        lang.cipher = base;
        const auto swaps = static_cast<std::size_t>(std::llround(profile.cipher_drift * double(n_concepts) / 2.0));
        for (std::size_t s = 0; s < swaps; ++s) {
            std::swap(lang.cipher[rng.uniform_int(n_concepts)], lang.cipher[rng.uniform_int(n_concepts)]);
        }
        lang.alignment = lang.seen ? rng.uniform(profile.seen_min, profile.seen_max)
                                   : sample_profile(profile, rng);
        std::vector<std::size_t> order(n_concepts);
        for (std::size_t c = 0; c < n_concepts; ++c) order[c] = c;
        rng.shuffle(order);
        const auto n_aligned = static_cast<std::size_t>(std::llround(lang.alignment * double(n_concepts)));
        lang.seen_region.assign(n_concepts, 0);
        for (std::size_t c = 0; c < n_aligned; ++c) lang.seen_region[order[c]] = 1;
        out.push_back(std::move(lang));
    }
    return out;
}

/// Language-independent content of one example: a label and concept ids.
struct LatentExample {
    int label = 0;
    std::vector<std::size_t> concepts;
    Split split = Split::Train;
};

/// Class-balanced latent draws with a stratified 80/10/10 split.
inline std::vector<LatentExample> generate_latent(const TopicTask& task, std::size_t n_per_class,
                                                  SeededRng& rng) {
    if (n_per_class == 0) throw ConfigError("generate_dataset: n_per_class must be at least 1");
    if (task.class_distributions.size() != task.n_classes) {
        throw ConfigError("topic task has no class distributions; build it with make_topic_task");
    }
    std::vector<LatentExample> out;
    for (std::size_t k = 0; k < task.n_classes; ++k) {
        const auto& dist = task.class_distributions[k];
        std::vector<LatentExample> cls;
        for (std::size_t n = 0; n < n_per_class; ++n) {
            LatentExample ex;
            ex.label = int(k);
            const std::size_t len = task.min_length + rng.uniform_int(task.max_length - task.min_length + 1);
            for (std::size_t t = 0; t < len; ++t) {
                double u = rng.uniform();
                std::size_t c = 0;
                while (c + 1 < dist.size() && u >= dist[c]) {
                    u -= dist[c];
                    ++c;
                }
                ex.concepts.push_back(c);
            }
            cls.push_back(std::move(ex));
        }
        rng.shuffle(cls);
        const std::size_t n_train = (n_per_class * 8) / 10;
        const std::size_t n_dev = (n_per_class - n_train) / 2;
        for (std::size_t i = 0; i < cls.size(); ++i) {
            cls[i].split = i < n_train ? Split::Train : (i < n_train + n_dev ? Split::Dev : Split::Test);
            out.push_back(std::move(cls[i]));
        }
    }
    return out;
}

/// Maps latent concepts through a language's cipher and alignment mask.
inline Dataset realize(const std::vector<LatentExample>& latent, const SyntheticLanguage& lang,
                       std::size_t n_classes) {
    Dataset ds(lang.id, n_classes);
    ds.set_seen(lang.seen);
    for (const auto& lx : latent) {
        LabeledExample ex;
        ex.label = lx.label;
        ex.split = lx.split;
        ex.tokens.reserve(lx.concepts.size());
        for (auto c : lx.concepts) ex.tokens.push_back(lang.token_for(c));
        ds.add(std::move(ex));
    }
    return ds;
}

inline Dataset generate_dataset(const SyntheticLanguage& lang, const TopicTask& task,
                                std::size_t n_per_class, SeededRng& rng) {
    return realize(generate_latent(task, n_per_class, rng), lang, task.n_classes);
}

// ---------------------------------------------------------------------------
// TSV loader
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

struct TsvOptions {
    std::string text_column = "text";
    std::string category_column = "category";
    std::string split_column = "split";  // optional; stratified 80/10/10 when absent
    std::size_t hash_bins = 30000;
    std::uint64_t split_seed = 0;
    // Shared label inventory across files; new categories are appended.
    std::vector<std::string>* label_vocabulary = nullptr;
};

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, '\t')) out.push_back(cell);
    if (!line.empty() && line.back() == '\t') out.emplace_back();
    return out;
}

/// Whitespace tokens hashed into [2, 2 + hash_bins).
inline std::vector<int> hash_tokenize(const std::string& text, std::size_t bins) {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string word;
    while (is >> word) ids.push_back(kFirstContentToken + int(fnv1a(word) % bins));
    return ids;
}

inline Dataset load_tsv_dataset(const std::filesystem::path& path, const TsvOptions& opt = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError("'" + path.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_tabs(line);
    auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (required) {
                throw FormatError("'" + path.string() + "': missing required column '" + name + "'");
            }
            return std::nullopt;
        }
        return std::size_t(it - header.begin());
    };
    const auto text_col = *column(opt.text_column, true);
    const auto cat_col = *column(opt.category_column, true);
    const auto split_col = column(opt.split_column, false);

    std::vector<std::string> local_labels;
    auto& labels = opt.label_vocabulary ? *opt.label_vocabulary : local_labels;
    struct Row {
        std::vector<int> tokens;
        int label;
        std::optional<Split> split;
    };
    std::vector<Row> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_tabs(line);
        if (cells.size() != header.size()) {
            throw FormatError("'" + path.string() + "' line " + std::to_string(line_no) + ": " +
                              std::to_string(cells.size()) + " fields, header has " +
                              std::to_string(header.size()));
        }
        const auto& cat = cells[cat_col];
        auto it = std::find(labels.begin(), labels.end(), cat);
        if (it == labels.end()) {
            labels.push_back(cat);
            it = labels.end() - 1;
        }
        Row r{hash_tokenize(cells[text_col], opt.hash_bins), int(it - labels.begin()), std::nullopt};
        if (split_col) {
            const auto& s = cells[*split_col];
            if (s == "train") r.split = Split::Train;
            else if (s == "dev" || s == "validation") r.split = Split::Dev;
            else if (s == "test") r.split = Split::Test;
            else throw FormatError("'" + path.string() + "' line " + std::to_string(line_no) +
                                   ": unknown split '" + s + "'");
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw FormatError("'" + path.string() + "' has a header but no data rows");

    if (!split_col) {
        // Stratified 80/10/10 per label, fixed by split_seed.
        SeededRng rng(opt.split_seed ^ fnv1a(path.stem().string()));
        std::map<int, std::vector<std::size_t>> by_label;
        for (std::size_t i = 0; i < rows.size(); ++i) by_label[rows[i].label].push_back(i);
        for (auto& [label, idx] : by_label) {
            rng.shuffle(idx);
            const std::size_t n_train = (idx.size() * 8) / 10;
            const std::size_t n_dev = (idx.size() - n_train) / 2;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                rows[idx[i]].split = i < n_train ? Split::Train : (i < n_train + n_dev ? Split::Dev : Split::Test);
            }
        }
    }
    Dataset ds(path.stem().string(), labels.size(), labels);
    for (auto& r : rows) {
        LabeledExample ex;
        ex.tokens = std::move(r.tokens);
        ex.label = r.label;
        ex.split = *r.split;
        ds.add(std::move(ex));
    }
    return ds;
}

/// Writes a dataset as TSV (text column holds "w<id>" words); used for
/// fixtures and for exporting synthetic data.
inline void write_tsv_dataset(const Dataset& ds, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "index\tsplit\tcategory\ttext\n";
    std::size_t idx = 0;
    for (auto s : {Split::Train, Split::Dev, Split::Test}) {
        for (const auto& ex : ds.split(s)) {
            const std::string cat = ex.label < int(ds.label_names().size())
                                        ? ds.label_names()[ex.label]
                                        : "class" + std::to_string(ex.label);
            out << idx++ << '\t' << to_string(s) << '\t' << cat << '\t';
            for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << (i ? " " : "") << 'w' << ex.tokens[i];
            out << '\n';
        }
    }
    ds.reset_access_log();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Language grouping
// ---------------------------------------------------------------------------

using LanguageSet = std::set<std::string>;

/// {ℓ : acc(ℓ) < threshold}.
inline LanguageSet classify_low_performing(const std::map<std::string, double>& reference_accuracy,
                                           double threshold = 0.60) {
    LanguageSet out;
    for (const auto& [lang, acc] : reference_accuracy) {
        if (!(acc >= 0.0 && acc <= 1.0)) {
            throw ConfigError("reference accuracy for '" + lang + "' is " + std::to_string(acc) +
                              ", outside [0,1]");
        }
        if (acc < threshold) out.insert(lang);
    }
    return out;
}

struct LanguageGrouping {
    std::vector<std::string> all;  // ordered
    LanguageSet seen;
    std::map<std::string, double> reference_accuracy;
    std::map<std::string, std::vector<std::string>> source_sets;
    double low_threshold = 0.60;

    bool contains(const std::string& lang) const {
        return std::find(all.begin(), all.end(), lang) != all.end();
    }
    LanguageSet unseen() const {
        LanguageSet out;
        for (const auto& l : all)
            if (!seen.count(l)) out.insert(l);
        return out;
    }
};

inline void to_json(Json& j, const LanguageGrouping& g) {
    Json langs = Json::array();
    for (const auto& l : g.all) {
        Json e{{"id", l}, {"seen", g.seen.count(l) > 0}};
        if (auto it = g.reference_accuracy.find(l); it != g.reference_accuracy.end()) {
            e["reference_accuracy"] = it->second;
        }
        langs.push_back(e);
    }
    j = Json{{"languages", langs}, {"source_sets", g.source_sets}, {"low_threshold", g.low_threshold}};
}

inline void from_json(const Json& j, LanguageGrouping& g) {
    g = {};
    for (const auto& e : j.at("languages")) {
        const auto id = e.at("id").get<std::string>();
        g.all.push_back(id);
        if (e.value("seen", false)) g.seen.insert(id);
        if (e.contains("reference_accuracy")) g.reference_accuracy[id] = e["reference_accuracy"].get<double>();
    }
    if (j.contains("source_sets")) {
        g.source_sets = j["source_sets"].get<std::map<std::string, std::vector<std::string>>>();
    }
    g.low_threshold = j.value("low_threshold", 0.60);
}

inline LanguageGrouping load_grouping(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open grouping file '" + path.string() + "'");
    try {
        return Json::parse(in).get<LanguageGrouping>();
    } catch (const Json::exception& e) {
        throw FormatError("grouping file '" + path.string() + "': " + e.what());
    }
}

inline void save_grouping(const LanguageGrouping& g, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << Json(g).dump(2) << '\n';
}

inline const std::vector<std::string> kTargetGroupNames{"All-wo-sources", "Seen-wo-sources", "Unseen",
                                                       "LowPerforming"};

struct TargetGroups {
    std::vector<std::pair<std::string, LanguageSet>> groups;  // in kTargetGroupNames order
    std::vector<std::string> warnings;

    const LanguageSet& at(const std::string& name) const {
        for (const auto& [n, s] : groups)
            if (n == name) return s;
        throw ConfigError("no target group named '" + name + "'");
    }
};

/// The four reporting groups for a given source set.
inline TargetGroups resolve_groups(const LanguageGrouping& g, const std::vector<std::string>& sources) {
    for (const auto& s : sources) {
        if (!g.contains(s)) throw ConfigError("source language '" + s + "' is not in the grouping");
    }
    const LanguageSet src(sources.begin(), sources.end());
    LanguageSet all_wo, seen_wo;
    for (const auto& l : g.all) {
        if (src.count(l)) continue;
        all_wo.insert(l);
        if (g.seen.count(l)) seen_wo.insert(l);
    }
    const auto unseen = g.unseen();
    const auto low = classify_low_performing(g.reference_accuracy, g.low_threshold);
    TargetGroups out;
    for (const auto& l : low) {
        if (!g.contains(l)) throw ConfigError("reference accuracy given for unknown language '" + l + "'");
        if (!unseen.count(l)) out.warnings.push_back("low-performing language '" + l + "' is a seen language");
    }
    out.groups = {{kTargetGroupNames[0], all_wo},
                  {kTargetGroupNames[1], seen_wo},
                  {kTargetGroupNames[2], unseen},
                  {kTargetGroupNames[3], low}};
    return out;
}

}  // namespace xpe
