#pragma once

// BBQ/MMLU-style record ingestion, prompt rendering, labeled-activation
// collection and contrast-pair construction.

#include "steerkit/engine.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace steerkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline constexpr std::array<std::string_view, 11> kBbqCategories = {
    "Age",           "Disability_status",  "Gender_identity", "Nationality", "Physical_appearance", "Race_ethnicity",
    "Race_x_SES",    "Race_x_gender",      "Religion",        "SES",         "Sexual_orientation"};
inline constexpr std::string_view kKnowledgeCategory = "knowledge";

enum class ContextCondition { Ambig, Disambig, None };

inline std::string_view to_string(ContextCondition c) {
    switch (c) {
    case ContextCondition::Ambig: return "AMBIG";
    case ContextCondition::Disambig: return "DISAMBIG";
    case ContextCondition::None: return "NONE";
    }
    return "NONE";
}

inline std::optional<ContextCondition> parse_context_condition(std::string_view s) {
    if (s == "AMBIG") return ContextCondition::Ambig;
    if (s == "DISAMBIG") return ContextCondition::Disambig;
    if (s == "NONE") return ContextCondition::None;
    return std::nullopt;
}

struct BiasRecord {
    std::string id;
    std::string category;
    std::string context;
    std::string question;
    std::array<std::string, 3> choices;
    int gold_index = 0;
    std::optional<int> target_index;
    std::optional<int> unknown_index;
    ContextCondition context_condition = ContextCondition::None;

    bool is_knowledge() const { return category == kKnowledgeCategory; }

    /// Throws Error(Data) describing the first violated invariant.
    void validate() const {
        auto in_range = [](int i) { return i >= 0 && i < 3; };
        if (id.empty()) fail(ErrorKind::Data, "record: empty id");
        const bool known = category == kKnowledgeCategory ||
                           std::find(kBbqCategories.begin(), kBbqCategories.end(), category) != kBbqCategories.end();
        if (!known) fail(ErrorKind::Data, "record " + id + ": unknown category '" + category + "'");
        if (!in_range(gold_index)) fail(ErrorKind::Data, "record " + id + ": gold_index out of range");
        if (target_index && !in_range(*target_index))
            fail(ErrorKind::Data, "record " + id + ": target_index out of range");
        if (unknown_index && !in_range(*unknown_index))
            fail(ErrorKind::Data, "record " + id + ": unknown_index out of range");
        if (target_index && unknown_index && *target_index == *unknown_index)
            fail(ErrorKind::Data, "record " + id + ": target_index equals unknown_index");
        if (context_condition == ContextCondition::Ambig) {
            if (target_index && *target_index == gold_index)
                fail(ErrorKind::Data, "record " + id + ": AMBIG gold answer cannot be the target");
            if (unknown_index && *unknown_index != gold_index)
                fail(ErrorKind::Data, "record " + id + ": AMBIG gold answer must be the unknown option");
        }
    }

    friend bool operator==(const BiasRecord&, const BiasRecord&) = default;
};

inline ordered_json to_json(const BiasRecord& r) {
    ordered_json j;
    j["id"] = r.id;
    j["category"] = r.category;
    j["context"] = r.context;
    j["question"] = r.question;
    j["choices"] = r.choices;
    j["gold_index"] = r.gold_index;
    j["target_index"] = r.target_index ? ordered_json(*r.target_index) : ordered_json(nullptr);
    j["unknown_index"] = r.unknown_index ? ordered_json(*r.unknown_index) : ordered_json(nullptr);
    j["context_condition"] = to_string(r.context_condition);
    return j;
}

inline BiasRecord record_from_json(const json& j) {
    auto require = [&j](const char* key) -> const json& {
        if (!j.contains(key)) fail(ErrorKind::Data, std::string("missing field '") + key + "'");
        return j.at(key);
    };
    auto optional_index = [&j](const char* key) -> std::optional<int> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        if (!j.at(key).is_number_integer()) fail(ErrorKind::Data, std::string("field '") + key + "' must be an integer");
        return j.at(key).get<int>();
    };
    try {
        BiasRecord r;
        r.id = require("id").get<std::string>();
        r.category = require("category").get<std::string>();
        r.context = require("context").get<std::string>();
        r.question = require("question").get<std::string>();
        const json& choices = require("choices");
        if (!choices.is_array() || choices.size() != 3)
            fail(ErrorKind::Data, "field 'choices' must be an array of exactly 3 strings");
        for (std::size_t i = 0; i < 3; ++i) r.choices[i] = choices[i].get<std::string>();
        if (!require("gold_index").is_number_integer()) fail(ErrorKind::Data, "field 'gold_index' must be an integer");
        r.gold_index = j.at("gold_index").get<int>();
        r.target_index = optional_index("target_index");
        r.unknown_index = optional_index("unknown_index");
        const auto cc = parse_context_condition(require("context_condition").get<std::string>());
        if (!cc) fail(ErrorKind::Data, "field 'context_condition' must be AMBIG, DISAMBIG or NONE");
        r.context_condition = *cc;
        r.validate();
        return r;
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, std::string("type error: ") + e.what());
    }
}

template <typename F>
void for_each_jsonl_line(const std::filesystem::path& path, F&& f) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Data, "cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        try {
            f(json::parse(line), line_no);
        } catch (const json::parse_error& e) {
            fail(ErrorKind::Data, path.string() + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
        } catch (const json::exception& e) {
            fail(ErrorKind::Data, path.string() + ":" + std::to_string(line_no) + ": schema error: " + e.what());
        } catch (const Error& e) {
            fail(ErrorKind::Data, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

/// JSONL, one record per line. Errors carry the offending line number.
inline std::vector<BiasRecord> parse_records(const std::filesystem::path& path) {
    std::vector<BiasRecord> out;
    std::set<std::string> ids;
    for_each_jsonl_line(path, [&](const json& j, std::size_t) {
        BiasRecord r = record_from_json(j);
        if (!ids.insert(r.id).second) fail(ErrorKind::Data, "duplicate id '" + r.id + "'");
        out.push_back(std::move(r));
    });
    return out;
}

inline void write_records(const std::filesystem::path& path, std::span<const BiasRecord> records) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    for (const auto& r : records) os << to_json(r).dump() << '\n';
}

/// Raw four-option knowledge question with a gold letter A-D.
struct McqRecord {
    std::string id;
    std::string question;
    std::array<std::string, 4> choices;
    char answer = 'A';
};

inline std::vector<McqRecord> parse_mcq(const std::filesystem::path& path) {
    std::vector<McqRecord> out;
    for_each_jsonl_line(path, [&](const json& j, std::size_t) {
        McqRecord r;
        r.id = j.at("id").get<std::string>();
        r.question = j.at("question").get<std::string>();
        const auto& c = j.at("choices");
        if (!c.is_array() || c.size() != 4) fail(ErrorKind::Data, "field 'choices' must have exactly 4 entries");
        for (std::size_t i = 0; i < 4; ++i) r.choices[i] = c[i].get<std::string>();
        const auto a = j.at("answer").get<std::string>();
        if (a.size() != 1 || a[0] < 'A' || a[0] > 'D') fail(ErrorKind::Data, "field 'answer' must be A, B, C or D");
        r.answer = a[0];
        out.push_back(std::move(r));
    });
    return out;
}

/// Drops option D; keeps only items whose gold answer survives.
inline std::vector<BiasRecord> filter_mmlu(std::span<const McqRecord> raw) {
    std::vector<BiasRecord> out;
    for (const auto& m : raw) {
        if (m.answer == 'D') continue;
        BiasRecord r;
        r.id = m.id;
        r.category = std::string(kKnowledgeCategory);
        r.question = m.question;
        r.choices = {m.choices[0], m.choices[1], m.choices[2]};
        r.gold_index = m.answer - 'A';
        r.context_condition = ContextCondition::None;
        out.push_back(std::move(r));
    }
    return out;
}

enum class ShotMode { Zero, Few };

inline std::string_view to_string(ShotMode m) { return m == ShotMode::Zero ? "zero" : "few"; }

inline constexpr char kLetters[3] = {'A', 'B', 'C'};

namespace detail {

inline void render_block(std::ostringstream& os, const BiasRecord& r) {
    if (!r.context.empty()) os << "Context: " << r.context << '\n';
    os << "Question: " << r.question << '\n';
    for (std::size_t i = 0; i < 3; ++i) os << kLetters[i] << ". " << r.choices[i] << '\n';
    os << "Answer:";
}

} // namespace detail

/// Exemplar blocks ("Answer: <letter>") separated by blank lines, then the
/// query block ending in "Answer:".
inline std::string render_prompt(const BiasRecord& record, ShotMode mode, std::span<const BiasRecord> exemplars = {}) {
    if (mode == ShotMode::Zero && !exemplars.empty())
        fail(ErrorKind::Runtime, "render_prompt: zero-shot mode takes no exemplars");
    std::ostringstream os;
    for (const auto& ex : exemplars) {
        if (ex.gold_index < 0 || ex.gold_index > 2) fail(ErrorKind::Data, "exemplar " + ex.id + " has no gold answer");
        detail::render_block(os, ex);
        os << ' ' << kLetters[ex.gold_index] << "\n\n";
    }
    detail::render_block(os, record);
    return os.str();
}

/// " <letter>. <choice text>" appended after "Answer:".
inline std::string answer_suffix(const BiasRecord& r, int index) {
    return std::string(" ") + kLetters[index] + ". " + r.choices[static_cast<std::size_t>(index)];
}

/// First standalone A/B/C (neighbours not alphanumeric); nullopt if absent.
inline std::optional<int> extract_answer(std::string_view text) {
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c < 'A' || c > 'C') continue;
        if (i > 0 && alnum(text[i - 1])) continue;
        if (i + 1 < text.size() && alnum(text[i + 1])) continue;
        return c - 'A';
    }
    return std::nullopt;
}

enum class DataSource { Bbq, Mmlu };

struct LabeledActivation {
    Activation activation;
    BiasLabel label = BiasLabel::Unbiased;
    DataSource source = DataSource::Bbq;
    ShotMode shot_mode = ShotMode::Zero;
    std::string record_id;
    std::string category;

    int y() const { return static_cast<int>(label); }
};

enum class AnswerMode { Generate, Constrained };

struct CollectSettings {
    std::vector<ShotMode> shot_modes = {ShotMode::Zero};
    AnswerMode answer_mode = AnswerMode::Generate;
    int few_shot_k = 4;
    int max_answer_tokens = 16;
    std::uint64_t seed = 0;
};

struct SkipReport {
    std::size_t unextractable = 0;
    std::size_t off_label = 0; // BBQ answer neither stereotypical nor gold/unknown
};

struct BadDataset {
    std::map<int, std::vector<LabeledActivation>> by_layer;
    SkipReport skipped;
};

/// Up to k exemplars from `pool`, never the query itself, seeded per query.
inline std::vector<BiasRecord> sample_exemplars(const BiasRecord& query, std::span<const BiasRecord> pool, int k,
                                                std::uint64_t seed) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pool.size(); ++i)
        if (pool[i].id != query.id) idx.push_back(i);
    Rng rng(derive_seed(seed, fnv1a(std::span<const char>(query.id.data(), query.id.size()))));
    rng.shuffle(idx);
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
    std::vector<BiasRecord> out;
    for (const auto i : idx) out.push_back(pool[i]);
    return out;
}

/// Model's answer to a rendered prompt: greedy generation + letter extraction,
/// or argmax over the 'A'/'B'/'C' logits right after the prompt.
inline std::optional<int> model_answer(const Model& model, const TokenSequence& prompt,
                                       std::span<const float> prompt_logits, AnswerMode mode, int max_tokens) {
    if (mode == AnswerMode::Constrained) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (prompt_logits[static_cast<std::size_t>(kLetters[i])] >
                prompt_logits[static_cast<std::size_t>(kLetters[best])])
                best = i;
        return best;
    }
    GenerationSettings gs;
    gs.max_new_tokens = max_tokens;
    const auto out = model.generate(prompt, {}, gs);
    return extract_answer(decode(std::span<const int>(out.tokens).subspan(prompt.size())));
}

/// Activations at every layer for each (record, shot mode), labeled from the
/// model's own answer: BBQ target -> biased, BBQ gold/unknown -> unbiased,
/// knowledge items -> unbiased. Other BBQ answers and unextractable outputs are skipped.
inline BadDataset build_bad_dataset(std::span<const BiasRecord> records, const Model& model,
                                    const CollectSettings& settings, std::span<const BiasRecord> exemplar_pool = {}) {
    BadDataset out;
    for (int l = 1; l <= model.n_layers(); ++l) out.by_layer[l];
    for (const auto& r : records) {
        for (const ShotMode mode : settings.shot_modes) {
            std::vector<BiasRecord> exemplars;
            if (mode == ShotMode::Few) exemplars = sample_exemplars(r, exemplar_pool, settings.few_shot_k, settings.seed);
            const TokenSequence prompt = encode(render_prompt(r, mode, exemplars));

            HookMap hooks;
            for (int l = 1; l <= model.n_layers(); ++l) hooks[l] = HookAction::read();
            auto fwd = model.forward(prompt, hooks);
            const auto answer = model_answer(model, prompt, fwd.logits, settings.answer_mode, settings.max_answer_tokens);
            if (!answer) {
                ++out.skipped.unextractable;
                continue;
            }
            BiasLabel label;
            if (r.is_knowledge()) {
                label = BiasLabel::Unbiased;
            } else if (r.target_index && *answer == *r.target_index) {
                label = BiasLabel::Biased;
            } else if (*answer == r.gold_index || (r.unknown_index && *answer == *r.unknown_index)) {
                label = BiasLabel::Unbiased;
            } else {
                ++out.skipped.off_label;
                continue;
            }
            for (auto& [l, a] : fwd.captured) {
                out.by_layer[l].push_back(LabeledActivation{std::move(a), label,
                                                            r.is_knowledge() ? DataSource::Mmlu : DataSource::Bbq,
                                                            mode, r.id, r.category});
            }
        }
    }
    return out;
}

struct ContrastPair {
    std::string positive; // unbiased completion
    std::string negative; // biased completion
    std::string category;

    friend bool operator==(const ContrastPair&, const ContrastPair&) = default;
};

/// `per_category` seeded AMBIG samples from every category present, in sorted
/// category order: P- appends the target answer, P+ the unknown answer.
inline std::vector<ContrastPair> build_contrast_pairs(std::span<const BiasRecord> records, int per_category,
                                                      std::uint64_t seed,
                                                      std::span<const std::string> categories = {}) {
    if (per_category < 1) fail(ErrorKind::Config, "contrast pairs: per_category must be >= 1");
    std::map<std::string, std::vector<const BiasRecord*>> pools;
    for (const auto& r : records)
        if (r.context_condition == ContextCondition::Ambig && r.target_index && r.unknown_index)
            pools[r.category].push_back(&r);
    std::vector<std::string> wanted(categories.begin(), categories.end());
    if (wanted.empty())
        for (const auto& [c, _] : pools) wanted.push_back(c);
    std::sort(wanted.begin(), wanted.end());

    std::vector<ContrastPair> out;
    for (const auto& cat : wanted) {
        auto pool = pools[cat];
        if (pool.size() < static_cast<std::size_t>(per_category))
            fail(ErrorKind::Data, "category '" + cat + "' has " + std::to_string(pool.size()) +
                                      " usable AMBIG records, fewer than " + std::to_string(per_category));
        Rng rng(derive_seed(seed, fnv1a(std::span<const char>(cat.data(), cat.size()))));
        rng.shuffle(pool);
        for (int i = 0; i < per_category; ++i) {
            const BiasRecord& r = *pool[static_cast<std::size_t>(i)];
            const std::string prompt = render_prompt(r, ShotMode::Zero);
            out.push_back({prompt + answer_suffix(r, *r.unknown_index), prompt + answer_suffix(r, *r.target_index), cat});
        }
    }
    return out;
}

inline std::vector<ContrastPair> parse_pairs(const std::filesystem::path& path) {
    std::vector<ContrastPair> out;
    for_each_jsonl_line(path, [&](const json& j, std::size_t) {
        out.push_back({j.at("positive").get<std::string>(), j.at("negative").get<std::string>(),
                       j.value("category", std::string{})});
    });
    return out;
}

inline void write_pairs(const std::filesystem::path& path, std::span<const ContrastPair> pairs) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    for (const auto& p : pairs) {
        ordered_json j;
        j["positive"] = p.positive;
        j["negative"] = p.negative;
        j["category"] = p.category;
        os << j.dump() << '\n';
    }
}

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            fail(ErrorKind::Config, "split: train_fraction must be in (0, 1)");
    }
};

/// Train size is round(f * n) (half up), kept within [1, n-1] when n >= 2.
inline std::size_t train_size(std::size_t n, double fraction) {
    auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    if (n >= 2) k = std::clamp<std::size_t>(k, 1, n - 1);
    return std::min(k, n);
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(std::span<const T> items, const SplitSpec& spec) {
    spec.validate();
    if (items.empty()) fail(ErrorKind::Runtime, "split: empty dataset");
    std::vector<std::size_t> idx(items.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(idx);
    const std::size_t k = train_size(items.size(), spec.train_fraction);
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i = 0; i < idx.size(); ++i) (i < k ? out.first : out.second).push_back(items[idx[i]]);
    return out;
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, const SplitSpec& spec) {
    return split(std::span<const T>(items), spec);
}

// Label sidecar for activation dumps: one JSON object per dumped vector.
inline void write_label_sidecar(const std::filesystem::path& path, std::span<const LabeledActivation> items) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    std::size_t i = 0;
    for (const auto& it : items) {
        ordered_json j;
        j["index"] = i++;
        j["label"] = it.y();
        j["source"] = it.source == DataSource::Bbq ? "BBQ" : "MMLU";
        j["shot_mode"] = to_string(it.shot_mode);
        j["id"] = it.record_id;
        j["category"] = it.category;
        os << j.dump() << '\n';
    }
}

/// Re-attaches sidecar labels to dumped activations.
inline std::vector<LabeledActivation> read_labeled_dump(const std::filesystem::path& dump_path,
                                                        const std::filesystem::path& sidecar_path) {
    const auto dump = read_activation_dump(dump_path);
    std::vector<LabeledActivation> out;
    for_each_jsonl_line(sidecar_path, [&](const json& j, std::size_t) {
        const auto i = j.at("index").get<std::size_t>();
        if (i != out.size() || i >= dump.activations.size())
            fail(ErrorKind::Data, "label sidecar does not match activation dump");
        const int y = j.at("label").get<int>();
        if (y != 0 && y != 1) fail(ErrorKind::Data, "label must be 0 or 1");
        LabeledActivation la;
        la.activation = dump.activations[i];
        la.label = static_cast<BiasLabel>(y);
        la.source = j.at("source").get<std::string>() == "MMLU" ? DataSource::Mmlu : DataSource::Bbq;
        la.shot_mode = j.at("shot_mode").get<std::string>() == "few" ? ShotMode::Few : ShotMode::Zero;
        la.record_id = j.value("id", std::string{});
        la.category = j.value("category", std::string{});
        out.push_back(std::move(la));
    });
    if (out.size() != dump.activations.size()) fail(ErrorKind::Data, "label sidecar does not match activation dump");
    return out;
}

/// Balanced labeled set from a synthetic spec (n per class, biased first).
inline std::vector<LabeledActivation> synth_labeled(const SyntheticSpec& spec, int per_class, int layer = 1,
                                                    const std::string& category = "synthetic") {
    std::vector<LabeledActivation> out;
    for (const BiasLabel label : {BiasLabel::Biased, BiasLabel::Unbiased})
        for (auto& a : synth_sample(spec, per_class, label, layer))
            out.push_back({std::move(a), label, DataSource::Bbq, ShotMode::Zero, {}, category});
    return out;
}

} // namespace steerkit
