#pragma once

// RunConfig: the single JSON file shared by every CLI subcommand.

#include "steerkit/probe.hpp"
#include "steerkit/steer.hpp"

#include <set>

namespace steerkit {

/// Stage indices for derive_seed(global_seed, stage).
enum class Stage : std::uint64_t {
    Collect = 1,
    Split = 2,
    Train = 3,
    Dsv = 4,
    Steer = 5,
    Visualize = 6,
    Experiments = 7,
    SyntheticDirections = 8,
    SyntheticSamples = 9,
};

/// Activation source that replaces a model: planted-direction Gaussians per layer.
struct SyntheticSource {
    int dim = 64;
    int layers = 4;
    int planted_layer = 2;
    double separation = 4.0;
    double noise = 1.0;
    int samples_per_class = 500;
    std::vector<std::string> categories = {"synthetic"};
    bool shared_direction = true;

    void validate() const {
        if (dim < 1 || layers < 1) fail(ErrorKind::Config, "synthetic: dim and layers must be >= 1");
        if (planted_layer < 1 || planted_layer > layers)
            fail(ErrorKind::Config, "synthetic: planted_layer must be in [1, layers]");
        if (!(separation >= 0.0) || !(noise >= 0.0))
            fail(ErrorKind::Config, "synthetic: separation and noise must be nonnegative");
        if (samples_per_class < 1) fail(ErrorKind::Config, "synthetic: samples_per_class must be >= 1");
        if (categories.empty()) fail(ErrorKind::Config, "synthetic: categories must be nonempty");
        if (!shared_direction && static_cast<int>(categories.size()) > dim)
            fail(ErrorKind::Config, "synthetic: more orthogonal categories than dimensions");
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";

    std::optional<std::filesystem::path> weights;
    std::optional<SyntheticSource> synthetic;

    struct Data {
        std::optional<std::filesystem::path> records, mmlu, exemplars, pairs, pair_activations, sentence_pairs, outputs,
            generations;
    } data;

    std::vector<int> layers; // empty: every layer
    SplitSpec split;
    TrainSettings train;
    CollectSettings collect;

    int dsv_per_category = 10;
    std::optional<int> dsv_layer;

    struct Steer {
        std::optional<std::filesystem::path> probe, dsv;
        double alpha = 1.0;
        Reapply reapply = Reapply::EveryStep;
        Redetect redetect = Redetect::PromptOnly;
    } steer;

    GenerationSettings generation;

    struct Eval {
        bool steered = false;
        std::optional<std::string> judge_endpoint;
        std::optional<std::filesystem::path> judge_template;
        int judge_parallelism = 4;
    } eval;

    struct Experiments {
        std::vector<double> alphas = {0.0, 0.1, 0.5, 1.0, 1.5, 2.0};
        std::vector<std::size_t> sizes = {10, 20, 30, 50, 100};
        std::vector<std::uint64_t> seeds = {0, 42, 123, 999, 1234};
        std::optional<std::size_t> pool_per_category;
    } experiments;

    struct Visualize {
        std::optional<int> layer;
        bool svg = false;
    } visualize;

    json raw; // echoed into reports

    std::uint64_t stage_seed(Stage s) const { return derive_seed(seed, static_cast<std::uint64_t>(s)); }
};

namespace detail {

inline void check_keys(const json& obj, const char* where, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) fail(ErrorKind::Config, std::string(where) + " must be an object");
    for (const auto& [k, _] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            fail(ErrorKind::Config, std::string("unknown key '") + k + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("bad value for '") + key + "': " + e.what());
    }
}

template <typename T>
void read(const json& obj, const char* key, std::optional<T>& out) {
    if (!obj.contains(key) || obj.at(key).is_null()) return;
    T v{};
    read(obj, key, v);
    out = std::move(v);
}

inline void read_path(const json& obj, const char* key, std::optional<std::filesystem::path>& out,
                      const std::filesystem::path& base) {
    std::optional<std::string> s;
    read(obj, key, s);
    if (s) {
        std::filesystem::path p(*s);
        out = p.is_absolute() ? p : base / p;
    }
}

} // namespace detail

/// Parses and validates; relative paths resolve against the config file's directory.
inline RunConfig parse_config(const json& j, const std::filesystem::path& base = ".") {
    using detail::check_keys;
    using detail::read;
    using detail::read_path;
    RunConfig c;
    c.raw = j;
    check_keys(j, "config", {"seed", "output_dir", "model", "data", "layers", "split", "train", "collect", "dsv",
                             "steer", "generation", "eval", "experiments", "visualize"});
    read(j, "seed", c.seed);
    std::optional<std::filesystem::path> out;
    read_path(j, "output_dir", out, base);
    if (out) c.output_dir = *out;
    else c.output_dir = base / "out";

    if (!j.contains("model")) fail(ErrorKind::Config, "missing 'model' section (weights or synthetic)");
    const json& m = j.at("model");
    check_keys(m, "model", {"weights", "synthetic"});
    read_path(m, "weights", c.weights, base);
    if (m.contains("synthetic")) {
        const json& s = m.at("synthetic");
        check_keys(s, "model.synthetic",
                   {"dim", "layers", "planted_layer", "separation", "noise", "samples_per_class", "categories",
                    "shared_direction"});
        SyntheticSource src;
        read(s, "dim", src.dim);
        read(s, "layers", src.layers);
        read(s, "planted_layer", src.planted_layer);
        read(s, "separation", src.separation);
        read(s, "noise", src.noise);
        read(s, "samples_per_class", src.samples_per_class);
        read(s, "categories", src.categories);
        read(s, "shared_direction", src.shared_direction);
        src.validate();
        c.synthetic = src;
    }
    if (c.weights.has_value() == c.synthetic.has_value())
        fail(ErrorKind::Config, "model: exactly one of 'weights' or 'synthetic' must be given");

    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, "data", {"records", "mmlu", "exemplars", "pairs", "pair_activations", "sentence_pairs", "outputs",
                               "generations"});
        read_path(d, "records", c.data.records, base);
        read_path(d, "mmlu", c.data.mmlu, base);
        read_path(d, "exemplars", c.data.exemplars, base);
        read_path(d, "pairs", c.data.pairs, base);
        read_path(d, "pair_activations", c.data.pair_activations, base);
        read_path(d, "sentence_pairs", c.data.sentence_pairs, base);
        read_path(d, "outputs", c.data.outputs, base);
        read_path(d, "generations", c.data.generations, base);
    }
    read(j, "layers", c.layers);

    c.split.seed = c.stage_seed(Stage::Split);
    if (j.contains("split")) {
        check_keys(j.at("split"), "split", {"train_fraction"});
        read(j.at("split"), "train_fraction", c.split.train_fraction);
    }
    c.split.validate();

    c.train.seed = c.stage_seed(Stage::Train);
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train", {"lambda", "max_iterations", "tolerance", "step_rule"});
        read(t, "lambda", c.train.lambda);
        read(t, "max_iterations", c.train.max_iterations);
        read(t, "tolerance", c.train.tolerance);
        read(t, "step_rule", c.train.step_rule);
    }
    c.train.validate();

    c.collect.seed = c.stage_seed(Stage::Collect);
    if (j.contains("collect")) {
        const json& t = j.at("collect");
        check_keys(t, "collect", {"shot_modes", "answer_mode", "few_shot_k", "max_answer_tokens"});
        std::vector<std::string> modes;
        read(t, "shot_modes", modes);
        if (!modes.empty()) {
            c.collect.shot_modes.clear();
            for (const auto& s : modes) {
                if (s == "zero") c.collect.shot_modes.push_back(ShotMode::Zero);
                else if (s == "few") c.collect.shot_modes.push_back(ShotMode::Few);
                else fail(ErrorKind::Config, "collect.shot_modes: expected 'zero' or 'few', got '" + s + "'");
            }
        }
        std::string am = "generate";
        read(t, "answer_mode", am);
        if (am == "generate") c.collect.answer_mode = AnswerMode::Generate;
        else if (am == "constrained") c.collect.answer_mode = AnswerMode::Constrained;
        else fail(ErrorKind::Config, "collect.answer_mode must be 'generate' or 'constrained'");
        read(t, "few_shot_k", c.collect.few_shot_k);
        read(t, "max_answer_tokens", c.collect.max_answer_tokens);
        if (c.collect.few_shot_k < 0 || c.collect.max_answer_tokens < 1)
            fail(ErrorKind::Config, "collect: few_shot_k must be >= 0 and max_answer_tokens >= 1");
    }

    if (j.contains("dsv")) {
        check_keys(j.at("dsv"), "dsv", {"per_category", "layer"});
        read(j.at("dsv"), "per_category", c.dsv_per_category);
        read(j.at("dsv"), "layer", c.dsv_layer);
        if (c.dsv_per_category < 1) fail(ErrorKind::Config, "dsv.per_category must be >= 1");
    }

    if (j.contains("steer")) {
        const json& s = j.at("steer");
        check_keys(s, "steer", {"probe", "dsv", "alpha", "reapply", "redetect"});
        read_path(s, "probe", c.steer.probe, base);
        read_path(s, "dsv", c.steer.dsv, base);
        read(s, "alpha", c.steer.alpha);
        std::string r = "every-step", d = "prompt";
        read(s, "reapply", r);
        read(s, "redetect", d);
        if (r == "once") c.steer.reapply = Reapply::Once;
        else if (r == "every-step") c.steer.reapply = Reapply::EveryStep;
        else fail(ErrorKind::Config, "steer.reapply must be 'once' or 'every-step'");
        if (d == "prompt") c.steer.redetect = Redetect::PromptOnly;
        else if (d == "step") c.steer.redetect = Redetect::PerStep;
        else fail(ErrorKind::Config, "steer.redetect must be 'prompt' or 'step'");
        if (!std::isfinite(c.steer.alpha)) fail(ErrorKind::Config, "steer.alpha must be finite");
    }

    if (j.contains("generation")) {
        check_keys(j.at("generation"), "generation", {"max_new_tokens"});
        read(j.at("generation"), "max_new_tokens", c.generation.max_new_tokens);
        if (c.generation.max_new_tokens < 0) fail(ErrorKind::Config, "generation.max_new_tokens must be >= 0");
    }

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "eval", {"steered", "judge_endpoint", "judge_template", "judge_parallelism"});
        read(e, "steered", c.eval.steered);
        read(e, "judge_endpoint", c.eval.judge_endpoint);
        read_path(e, "judge_template", c.eval.judge_template, base);
        read(e, "judge_parallelism", c.eval.judge_parallelism);
        if (c.eval.judge_parallelism < 1) fail(ErrorKind::Config, "eval.judge_parallelism must be >= 1");
    }

    if (j.contains("experiments")) {
        const json& e = j.at("experiments");
        check_keys(e, "experiments", {"alphas", "sizes", "seeds", "pool_per_category"});
        read(e, "alphas", c.experiments.alphas);
        read(e, "sizes", c.experiments.sizes);
        read(e, "seeds", c.experiments.seeds);
        read(e, "pool_per_category", c.experiments.pool_per_category);
        if (c.experiments.alphas.empty()) fail(ErrorKind::Config, "experiments.alphas must be nonempty");
    }

    if (j.contains("visualize")) {
        check_keys(j.at("visualize"), "visualize", {"layer", "svg"});
        read(j.at("visualize"), "layer", c.visualize.layer);
        read(j.at("visualize"), "svg", c.visualize.svg);
    }

    if (c.synthetic) {
        for (const int l : c.layers)
            if (l < 1 || l > c.synthetic->layers) fail(ErrorKind::Config, "layers: entry out of range");
    } else {
        for (const int l : c.layers)
            if (l < 1) fail(ErrorKind::Config, "layers: entries must be >= 1");
    }
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Config, "cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Config, "config " + path.string() + ": " + e.what());
    }
    return parse_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

} // namespace steerkit
