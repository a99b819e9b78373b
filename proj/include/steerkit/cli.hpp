#pragma once

// Pipeline subcommands behind the steerkit executable. Each command reads a
// validated RunConfig and writes its artifacts into config.output_dir.

#include "steerkit/config.hpp"
#include "steerkit/eval.hpp"

#include <cstdio>
#include <iomanip>
#include <iostream>

namespace steerkit::cli {

namespace fs = std::filesystem;

inline std::string num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

struct Paths {
    fs::path root;

    fs::path dump(int layer) const { return root / ("activations_layer" + std::to_string(layer) + ".stka"); }
    fs::path labels() const { return root / "labels.jsonl"; }
    fs::path probe(int layer) const { return root / ("probe_layer" + std::to_string(layer) + ".json"); }
    fs::path curve() const { return root / "layer_accuracy.csv"; }
    fs::path selected() const { return root / "selected_layer.json"; }
    fs::path dsv() const { return root / "dsv.json"; }
};

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    os << text;
    if (!os) fail(ErrorKind::Runtime, "write failed: " + path.string());
}

// generated bytes need not be valid UTF-8
inline std::string dump_json(const ordered_json& j, int indent = -1) {
    return j.dump(indent, ' ', false, ordered_json::error_handler_t::replace);
}

inline void write_json(const fs::path& path, const ordered_json& j) { write_text(path, dump_json(j, 2) + "\n"); }

/// Shared state for one command invocation.
class Workspace {
public:
    explicit Workspace(RunConfig cfg) : cfg_(std::move(cfg)), paths_{cfg_.output_dir} {
        std::error_code ec;
        fs::create_directories(paths_.root, ec);
        if (ec || !fs::is_directory(paths_.root))
            fail(ErrorKind::Config, "output_dir is not writable: " + paths_.root.string());
    }

    const RunConfig& config() const { return cfg_; }
    const Paths& paths() const { return paths_; }
    bool synthetic() const { return cfg_.synthetic.has_value(); }

    const Model& model() {
        if (!cfg_.weights) fail(ErrorKind::Config, "this command needs model.weights");
        if (!model_) model_.emplace(Model::load(*cfg_.weights));
        return *model_;
    }

    int n_layers() { return synthetic() ? cfg_.synthetic->layers : model().n_layers(); }

    std::vector<int> layers() {
        const int L = n_layers();
        std::vector<int> out = cfg_.layers;
        if (out.empty())
            for (int l = 1; l <= L; ++l) out.push_back(l);
        for (const int l : out)
            if (l < 1 || l > L) fail(ErrorKind::Config, "layer " + std::to_string(l) + " out of range");
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    /// Planted direction per synthetic category (shared or mutually orthogonal).
    std::vector<std::vector<double>> synthetic_directions() const {
        const auto& s = *cfg_.synthetic;
        const auto seed = cfg_.stage_seed(Stage::SyntheticDirections);
        std::vector<std::vector<double>> dirs;
        for (std::size_t k = 0; k < s.categories.size(); ++k) {
            if (s.shared_direction) dirs.push_back(random_unit_vector(s.dim, seed));
            else dirs.push_back(orthogonal_unit_vector(dirs, s.dim, derive_seed(seed, k)));
        }
        return dirs;
    }

    /// Per-category layered spec; `stream` separates independent draws.
    LayeredSyntheticSpec synthetic_spec(std::size_t category, std::uint64_t stream) const {
        const auto& s = *cfg_.synthetic;
        LayeredSyntheticSpec spec;
        spec.n_layers = s.layers;
        spec.planted_layer = s.planted_layer;
        spec.base.dim = s.dim;
        spec.base.direction = synthetic_directions().at(category);
        spec.base.separation = s.separation;
        spec.base.noise = s.noise;
        spec.base.seed = derive_seed(stream, category);
        return spec;
    }

    std::vector<LabeledActivation> labeled(int layer) const {
        if (!fs::exists(paths_.dump(layer)))
            fail(ErrorKind::Data, "missing activation dump for layer " + std::to_string(layer) +
                                      " (run collect-activations first)");
        return read_labeled_dump(paths_.dump(layer), paths_.labels());
    }

    int resolve_layer(std::optional<int> explicit_layer) const {
        if (explicit_layer) return *explicit_layer;
        if (fs::exists(paths_.selected())) {
            std::ifstream is(paths_.selected());
            return json::parse(is).at("layer").get<int>();
        }
        fail(ErrorKind::Config, "no layer given and no selected_layer.json (run select-layer first)");
    }

    std::vector<BiasRecord> records() const {
        std::vector<BiasRecord> out;
        if (cfg_.data.records) out = parse_records(*cfg_.data.records);
        if (cfg_.data.mmlu) {
            const auto raw = parse_mcq(*cfg_.data.mmlu);
            auto kept = filter_mmlu(raw);
            out.insert(out.end(), kept.begin(), kept.end());
        }
        return out;
    }

    SteerPolicy policy() {
        const int layer = cfg_.steer.probe ? -1 : resolve_layer(std::nullopt);
        SteerPolicy p;
        p.probe = load_probe(cfg_.steer.probe ? *cfg_.steer.probe : paths_.probe(layer));
        p.dsv = load_dsv(cfg_.steer.dsv ? *cfg_.steer.dsv : paths_.dsv());
        p.alpha = cfg_.steer.alpha;
        p.reapply = cfg_.steer.reapply;
        p.redetect = cfg_.steer.redetect;
        p.validate();
        return p;
    }

private:
    RunConfig cfg_;
    Paths paths_;
    std::optional<Model> model_;
};

// ---------------------------------------------------------------------------

inline void cmd_init_model(const ModelConfig& mc, const fs::path& out) {
    mc.validate();
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    Model::random(mc).save(out);
    std::cout << "wrote " << out.string() << " (L=" << mc.n_layers << ", d=" << mc.hidden_dim << ")\n";
}

inline void cmd_collect_activations(Workspace& ws) {
    const auto& cfg = ws.config();
    std::vector<LabeledActivation> items_l1;
    std::map<int, std::vector<Activation>> per_layer;
    ordered_json report;
    const auto layers = ws.layers();

    if (ws.synthetic()) {
        const auto& s = *cfg.synthetic;
        for (const int l : layers) {
            std::vector<LabeledActivation> all;
            for (std::size_t k = 0; k < s.categories.size(); ++k) {
                const auto spec = ws.synthetic_spec(k, cfg.stage_seed(Stage::SyntheticSamples));
                auto part = synth_labeled(spec.at_layer(l), s.samples_per_class, l, s.categories[k]);
                all.insert(all.end(), part.begin(), part.end());
            }
            for (const auto& it : all) per_layer[l].push_back(it.activation);
            if (items_l1.empty()) items_l1 = std::move(all);
        }
        report["source"] = "synthetic";
    } else {
        if (!cfg.data.records && !cfg.data.mmlu) fail(ErrorKind::Config, "collect-activations needs data.records or data.mmlu");
        const auto records = ws.records();
        const auto pool = cfg.data.exemplars ? parse_records(*cfg.data.exemplars) : records;
        auto bad = build_bad_dataset(records, ws.model(), cfg.collect, pool);
        for (const int l : layers)
            for (const auto& it : bad.by_layer.at(l)) per_layer[l].push_back(it.activation);
        items_l1 = bad.by_layer.at(layers.front());
        report["source"] = "model";
        report["records"] = records.size();
        report["skipped_unextractable"] = bad.skipped.unextractable;
        report["skipped_off_label"] = bad.skipped.off_label;
    }
    const int dim = ws.synthetic() ? cfg.synthetic->dim : ws.model().dim();
    for (const int l : layers) write_activation_dump(ws.paths().dump(l), l, dim, per_layer[l]);
    write_label_sidecar(ws.paths().labels(), items_l1);
    report["layers"] = layers;
    report["items"] = items_l1.size();
    write_json(ws.paths().root / "collect_report.json", report);
    std::cout << "collected " << items_l1.size() << " labeled activations x " << layers.size() << " layers\n";
}

inline void cmd_train_probes(Workspace& ws) {
    const auto& cfg = ws.config();
    LayerAccuracyCurve curve;
    for (const int l : ws.layers()) {
        const auto data = ws.labeled(l);
        if (data.size() < 2) fail(ErrorKind::Data, "layer " + std::to_string(l) + ": need at least 2 labeled activations");
        const auto [tr, va] = split(data, cfg.split);
        const auto probe = train(tr, va, l, cfg.train);
        save_probe(ws.paths().probe(l), probe);
        curve[l] = probe.val_accuracy;
        std::cout << "layer " << l << ": val accuracy " << num(probe.val_accuracy) << " (" << probe.iterations
                  << " iterations)\n";
    }
    std::string csv = "layer,accuracy\n";
    for (const auto& [l, a] : curve) csv += std::to_string(l) + "," + num(a) + "\n";
    write_text(ws.paths().curve(), csv);
}

inline int cmd_select_layer(Workspace& ws) {
    const auto& cfg = ws.config();
    std::map<int, ProbeModel> models;
    std::map<int, std::vector<LabeledActivation>> selection;
    const auto layers = ws.layers();
    for (const int l : layers) {
        if (!fs::exists(ws.paths().probe(l))) fail(ErrorKind::Data, "missing probe for layer " + std::to_string(l));
        models[l] = load_probe(ws.paths().probe(l));
        selection[l] = split(ws.labeled(l), cfg.split).second;
    }
    const auto sel = select_layer(models, selection);
    ordered_json j;
    j["layer"] = sel.layer;
    ordered_json acc = ordered_json::object();
    for (const auto& [l, a] : sel.accuracies) acc[std::to_string(l)] = a;
    j["accuracies"] = acc;
    write_json(ws.paths().selected(), j);
    std::cout << sel.layer << "\n";
    return sel.layer;
}

/// Stub activation pairs: JSONL {positive: [...], negative: [...], category}.
inline std::vector<ActivationPair> read_pair_activations(const fs::path& path, int layer) {
    std::vector<ActivationPair> out;
    for_each_jsonl_line(path, [&](const json& j, std::size_t) {
        ActivationPair p{{layer, j.at("positive").get<std::vector<float>>()},
                         {layer, j.at("negative").get<std::vector<float>>()},
                         j.value("category", std::string{})};
        if (p.positive.dim() != p.negative.dim()) fail(ErrorKind::Data, "pair activation lengths differ");
        out.push_back(std::move(p));
    });
    return out;
}

/// Contrast-pair activations at `layer`, `per_category` per category, from the configured source.
inline std::vector<ActivationPair> gather_pairs(Workspace& ws, int layer, int per_category, std::uint64_t stream) {
    const auto& cfg = ws.config();
    if (cfg.data.pair_activations) return read_pair_activations(*cfg.data.pair_activations, layer);
    if (ws.synthetic()) {
        const auto& s = *cfg.synthetic;
        if (layer < 1 || layer > s.layers) fail(ErrorKind::Config, "layer out of range");
        std::vector<ActivationPair> out;
        for (std::size_t k = 0; k < s.categories.size(); ++k) {
            auto spec = ws.synthetic_spec(k, stream).at_layer(layer);
            auto part = synth_pairs(spec, per_category, layer, s.categories[k]);
            out.insert(out.end(), part.begin(), part.end());
        }
        return out;
    }
    std::vector<ContrastPair> pairs;
    if (cfg.data.pairs) {
        pairs = parse_pairs(*cfg.data.pairs);
    } else {
        if (!cfg.data.records) fail(ErrorKind::Config, "contrast pairs need data.pairs or data.records");
        pairs = build_contrast_pairs(ws.records(), per_category, stream);
        write_pairs(ws.paths().root / "pairs.jsonl", pairs);
    }
    if (layer < 1 || layer > ws.model().n_layers()) fail(ErrorKind::Config, "layer out of range");
    return extract_pairs(std::span<const ContrastPair>(pairs), ModelActivations{ws.model()}, layer);
}

inline SteeringVector cmd_compute_dsv(Workspace& ws) {
    const auto& cfg = ws.config();
    const int layer = ws.resolve_layer(cfg.dsv_layer);
    const auto seed = cfg.stage_seed(Stage::Dsv);
    const auto pairs = gather_pairs(ws, layer, cfg.dsv_per_category, seed);
    auto sv = compute_dsv(std::span<const ActivationPair>(pairs), seed);
    save_dsv(ws.paths().dsv(), sv);
    std::cout << "dsv at layer " << sv.layer << " from " << sv.n_pairs << " pairs, norm "
              << num(norm(std::span<const double>(sv.v))) << "\n";
    return sv;
}

inline TokenSequence cmd_generate(Workspace& ws, const std::string& prompt) {
    const auto& m = ws.model();
    const auto in = encode(prompt);
    const auto out = m.generate(in, {}, ws.config().generation);
    ordered_json j;
    j["prompt"] = prompt;
    j["output_tokens"] = out.tokens;
    j["generation"] = decode(std::span<const int>(out.tokens).subspan(in.size()));
    write_json(ws.paths().root / "generation.json", j);
    std::cout << j["generation"].get<std::string>() << "\n";
    return out;
}

/// Held-out biased synthetic activations at `layer`, one block per category.
inline std::vector<Activation> heldout_biased(Workspace& ws, int layer) {
    const auto& s = *ws.config().synthetic;
    std::vector<Activation> out;
    for (std::size_t k = 0; k < s.categories.size(); ++k) {
        auto spec = ws.synthetic_spec(k, ws.config().stage_seed(Stage::Steer)).at_layer(layer);
        auto part = synth_sample(spec, s.samples_per_class, BiasLabel::Biased, layer);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

inline void cmd_steer(Workspace& ws, const std::optional<std::string>& prompt) {
    const auto policy = ws.policy();
    if (ws.synthetic()) {
        const auto biased = heldout_biased(ws, policy.layer());
        std::size_t triggered = 0;
        for (const auto& a : biased) triggered += steer_activation(policy, a).triggered ? 1 : 0;
        ordered_json j;
        j["layer"] = policy.layer();
        j["alpha"] = policy.alpha;
        j["n"] = biased.size();
        j["n_triggered"] = triggered;
        j["flip_rate"] = flip_rate(policy, biased);
        write_json(ws.paths().root / "steer_flip.json", j);
        std::cout << "flip rate " << num(j["flip_rate"].get<double>()) << " over " << biased.size() << " biased samples\n";
        return;
    }
    if (!prompt) fail(ErrorKind::Config, "steer needs --prompt with a model");
    const auto in = encode(*prompt);
    const auto outcome = steer_generate(ws.model(), in, policy, ws.config().generation);
    auto j = to_json(outcome, policy, in.size());
    write_json(ws.paths().root / "steer_outcome.json", j);
    std::cout << j["generation"].get<std::string>() << "\n";
}

/// Zero-shot generations for each record, optionally steered.
inline std::vector<std::string> generate_answers(Workspace& ws, std::span<const BiasRecord> records,
                                                 const SteerPolicy* policy) {
    std::vector<std::string> out;
    for (const auto& r : records) {
        const auto in = encode(render_prompt(r, ShotMode::Zero));
        const auto seq = policy ? steer_generate(ws.model(), in, *policy, ws.config().generation).output
                                : ws.model().generate(in, {}, ws.config().generation);
        out.push_back(decode(std::span<const int>(seq.tokens).subspan(in.size())));
    }
    return out;
}

inline EvalReport cmd_eval_qa(Workspace& ws) {
    const auto& cfg = ws.config();
    if (!cfg.data.records && !cfg.data.mmlu) fail(ErrorKind::Config, "eval qa needs data.records");
    const auto records = ws.records();
    std::vector<std::string> outputs;
    if (cfg.data.outputs) {
        std::map<std::string, std::string> by_id;
        for_each_jsonl_line(*cfg.data.outputs, [&](const json& j, std::size_t) {
            by_id[j.at("id").get<std::string>()] = j.at("output").get<std::string>();
        });
        for (const auto& r : records) {
            const auto it = by_id.find(r.id);
            if (it == by_id.end()) fail(ErrorKind::Data, "no output for record '" + r.id + "'");
            outputs.push_back(it->second);
        }
    } else {
        std::optional<SteerPolicy> policy;
        if (cfg.eval.steered) policy = ws.policy();
        outputs = generate_answers(ws, records, policy ? &*policy : nullptr);
    }
    auto report = make_report(qa_accuracy(records, outputs));
    report.config = cfg.raw;
    write_json(ws.paths().root / "report_qa.json", to_json(report));
    std::cout << "accuracy " << num(report.accuracy) << "\n";
    return report;
}

inline double cmd_eval_crows(Workspace& ws) {
    const auto& cfg = ws.config();
    if (!cfg.data.sentence_pairs) fail(ErrorKind::Config, "eval crows needs data.sentence_pairs");
    const auto pairs = parse_sentence_pairs(*cfg.data.sentence_pairs);
    const double score = stereotype_score(pairs, ws.model());
    ordered_json j;
    j["task"] = "crows";
    j["stereotype_score"] = score;
    j["n_pairs"] = pairs.size();
    j["config"] = cfg.raw;
    write_json(ws.paths().root / "report_crows.json", j);
    std::cout << "stereotype score " << num(score) << "\n";
    return score;
}

inline void cmd_eval_judge(Workspace& ws) {
    const auto& cfg = ws.config();
    if (!cfg.data.generations) fail(ErrorKind::Config, "eval judge needs data.generations");
    std::unique_ptr<Judge> judge;
    if (cfg.eval.judge_endpoint) {
        if (!cfg.eval.judge_template) fail(ErrorKind::Config, "eval.judge_endpoint needs eval.judge_template");
        judge = std::make_unique<HttpJudge>(*cfg.eval.judge_endpoint, JudgeTemplate::load(*cfg.eval.judge_template));
    } else {
        judge = std::make_unique<StubJudge>();
    }
    std::vector<std::string> ids, gens;
    for_each_jsonl_line(*cfg.data.generations, [&](const json& j, std::size_t) {
        ids.push_back(j.at("id").get<std::string>());
        gens.push_back(j.at("generation").get<std::string>());
    });
    const auto scores = judge_client(gens, *judge, cfg.eval.judge_parallelism);
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ordered_json j;
        j["id"] = ids[i];
        j["score"] = scores[i].score ? ordered_json(*scores[i].score) : ordered_json(nullptr);
        if (!scores[i].error.empty()) j["error"] = scores[i].error;
        out += dump_json(j) + "\n";
    }
    write_text(ws.paths().root / "judge_scores.jsonl", out);
    std::cout << "scored " << ids.size() << " generations\n";
}

// Minimal scatter plot: biased red, unbiased green, arrow between class means.
inline std::string scatter_svg(const std::vector<std::vector<double>>& pts, std::span<const int> labels,
                               std::span<const double> from, std::span<const double> to) {
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& p : pts) {
        xmin = std::min(xmin, p[0]), xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]), ymax = std::max(ymax, p[1]);
    }
    const double w = 600, h = 600, pad = 30;
    const double sx = (w - 2 * pad) / std::max(xmax - xmin, 1e-12), sy = (h - 2 * pad) / std::max(ymax - ymin, 1e-12);
    auto X = [&](double x) { return num(pad + (x - xmin) * sx); };
    auto Y = [&](double y) { return num(h - pad - (y - ymin) * sy); };
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\">\n";
    s += "<defs><marker id=\"head\" markerWidth=\"8\" markerHeight=\"8\" refX=\"4\" refY=\"4\" orient=\"auto\">"
         "<path d=\"M0,0 L8,4 L0,8 z\" fill=\"black\"/></marker></defs>\n";
    for (std::size_t i = 0; i < pts.size(); ++i)
        s += "<circle cx=\"" + X(pts[i][0]) + "\" cy=\"" + Y(pts[i][1]) + "\" r=\"2\" fill=\"" +
             (labels[i] == 0 ? "#d62728" : "#2ca02c") + "\" fill-opacity=\"0.6\"/>\n";
    s += "<line x1=\"" + X(from[0]) + "\" y1=\"" + Y(from[1]) + "\" x2=\"" + X(to[0]) + "\" y2=\"" + Y(to[1]) +
         "\" stroke=\"black\" stroke-width=\"2\" marker-end=\"url(#head)\"/>\n</svg>\n";
    return s;
}

inline PcaResult cmd_visualize(Workspace& ws, bool svg) {
    const auto& cfg = ws.config();
    const int layer = ws.resolve_layer(cfg.visualize.layer);
    const auto data = ws.labeled(layer);
    std::vector<Activation> acts;
    std::vector<int> labels;
    for (const auto& it : data) {
        acts.push_back(it.activation);
        labels.push_back(it.y());
    }
    const auto pca = pca_project(acts, 2);
    std::array<std::vector<double>, 2> means{std::vector<double>(2, 0.0), std::vector<double>(2, 0.0)};
    std::array<std::size_t, 2> counts{0, 0};
    std::string csv = "x,y,label\n";
    for (std::size_t i = 0; i < acts.size(); ++i) {
        csv += num(pca.points[i][0]) + "," + num(pca.points[i][1]) + "," + std::to_string(labels[i]) + "\n";
        const auto c = static_cast<std::size_t>(labels[i]);
        means[c][0] += pca.points[i][0];
        means[c][1] += pca.points[i][1];
        ++counts[c];
    }
    for (std::size_t c = 0; c < 2; ++c)
        for (auto& m : means[c]) m = counts[c] ? m / static_cast<double>(counts[c]) : 0.0;
    write_text(ws.paths().root / "pca.csv", csv);
    ordered_json j;
    j["layer"] = layer;
    j["components"] = pca.components;
    j["explained_variance_ratio"] = pca.explained_variance_ratio;
    j["eigenvalues"] = pca.eigenvalues;
    j["arrow"] = {{"from", means[0]}, {"to", means[1]}};
    write_json(ws.paths().root / "pca.json", j);
    if (svg || cfg.visualize.svg) write_text(ws.paths().root / "pca.svg", scatter_svg(pca.points, labels, means[0], means[1]));
    std::cout << "pca explained variance " << num(pca.explained_variance_ratio[0]) << ", "
              << num(pca.explained_variance_ratio[1]) << "\n";
    return pca;
}

inline std::string matrix_csv(const std::string& corner, const std::vector<std::string>& rows,
                              const std::vector<std::string>& cols, const std::vector<std::vector<double>>& m) {
    std::string s = corner;
    for (const auto& c : cols) s += "," + c;
    s += "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        s += rows[i];
        for (const double v : m[i]) s += "," + num(v);
        s += "\n";
    }
    return s;
}

inline void experiment_xcat(Workspace& ws) {
    const auto& cfg = ws.config();
    const int layer = ws.resolve_layer(cfg.dsv_layer);
    std::map<std::string, std::vector<LabeledActivation>> by_cat;
    for (auto& it : ws.labeled(layer)) by_cat[it.category].push_back(std::move(it));
    std::vector<std::string> cats;
    std::vector<ProbeModel> models;
    std::vector<std::vector<LabeledActivation>> vals;
    std::vector<LabeledActivation> all_train, all_val;
    for (auto& [cat, items] : by_cat) {
        if (items.size() < 2) fail(ErrorKind::Data, "category '" + cat + "' has fewer than 2 items");
        auto [tr, va] = split(items, cfg.split);
        models.push_back(train(tr, va, layer, cfg.train));
        all_train.insert(all_train.end(), tr.begin(), tr.end());
        all_val.insert(all_val.end(), va.begin(), va.end());
        vals.push_back(std::move(va));
        cats.push_back(cat);
    }
    models.push_back(train(all_train, all_val, layer, cfg.train));
    auto rows = cats;
    rows.push_back("All");
    const auto m = cross_category_matrix(std::span<const ProbeModel>(models), std::span<const std::vector<LabeledActivation>>(vals));
    write_text(ws.paths().root / "xcat.csv", matrix_csv("train\\eval", rows, cats, m));
    std::cout << "wrote xcat.csv (" << cats.size() << " categories)\n";
}

inline void experiment_dsv_sim(Workspace& ws) {
    const auto& cfg = ws.config();
    const int layer = ws.resolve_layer(cfg.dsv_layer);
    const auto pairs = gather_pairs(ws, layer, cfg.dsv_per_category, cfg.stage_seed(Stage::Experiments));
    std::map<std::string, std::vector<ActivationPair>> by_cat;
    for (const auto& p : pairs) by_cat[p.category].push_back(p);
    const auto [dsvs, sim] = dsv_similarity_matrix(by_cat);
    std::vector<std::string> cats;
    for (const auto& [c, _] : by_cat) cats.push_back(c);
    write_text(ws.paths().root / "dsv_sim.csv", matrix_csv("category", cats, cats, sim));
    std::cout << "wrote dsv_sim.csv (" << cats.size() << " categories)\n";
}

inline void experiment_robustness(Workspace& ws) {
    const auto& cfg = ws.config();
    const int layer = ws.resolve_layer(cfg.dsv_layer);
    const auto& ex = cfg.experiments;
    if (ex.sizes.empty() || ex.seeds.empty()) fail(ErrorKind::Config, "experiments.sizes and seeds must be nonempty");
    const std::size_t max_size = *std::max_element(ex.sizes.begin(), ex.sizes.end());
    const std::size_t pool = ex.pool_per_category.value_or(2 * max_size);
    const auto pairs = gather_pairs(ws, layer, static_cast<int>(pool), cfg.stage_seed(Stage::Experiments));
    const auto rep = robustness_sweep(std::span<const ActivationPair>(pairs), ex.sizes, ex.seeds);
    std::string csv = "size,seed,cosine_to_full\n";
    for (const auto& r : rep.rows) csv += std::to_string(r.size) + "," + std::to_string(r.seed) + "," + num(r.cosine_to_full) + "\n";
    write_text(ws.paths().root / "robustness.csv", csv);
    std::cout << "wrote robustness.csv (" << rep.rows.size() << " rows)\n";
}

inline void experiment_alpha_sweep(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto policy = ws.policy();
    std::string csv;
    if (ws.synthetic()) {
        const auto biased = heldout_biased(ws, policy.layer());
        csv = "alpha,flip_rate\n";
        for (const auto& [a, r] : flip_rate_sweep(policy, biased, cfg.experiments.alphas)) csv += num(a) + "," + num(r) + "\n";
    } else {
        if (!cfg.data.records && !cfg.data.mmlu) fail(ErrorKind::Config, "alpha-sweep needs data.records");
        const auto records = ws.records();
        std::vector<TokenSequence> prompts;
        for (const auto& r : records) prompts.push_back(encode(render_prompt(r, ShotMode::Zero)));
        const OutputMetric accuracy = [&records](std::span<const TokenSequence> in, std::span<const TokenSequence> out) {
            std::vector<std::string> texts;
            for (std::size_t i = 0; i < out.size(); ++i)
                texts.push_back(decode(std::span<const int>(out[i].tokens).subspan(in[i].size())));
            return qa_accuracy(records, texts).accuracy;
        };
        const auto rows = alpha_sweep(ws.model(), prompts, policy, cfg.experiments.alphas, accuracy, cfg.generation);
        csv = "alpha,accuracy,n_triggered\n";
        for (const auto& r : rows)
            csv += (r.alpha ? num(*r.alpha) : std::string("base")) + "," + num(r.metric) + "," + std::to_string(r.n_triggered) + "\n";
    }
    write_text(ws.paths().root / "alpha_sweep.csv", csv);
    std::cout << "wrote alpha_sweep.csv\n";
}

inline void cmd_experiments(Workspace& ws, const std::string& which) {
    if (which == "xcat") experiment_xcat(ws);
    else if (which == "dsv-sim") experiment_dsv_sim(ws);
    else if (which == "robustness") experiment_robustness(ws);
    else if (which == "alpha-sweep") experiment_alpha_sweep(ws);
    else fail(ErrorKind::Config, "unknown experiment '" + which + "' (xcat, dsv-sim, robustness, alpha-sweep)");
}

/// {"error": kind, "message": ...} for stderr.
inline std::string error_json(const Error& e) {
    ordered_json j;
    j["error"] = e.kind_name();
    j["message"] = e.what();
    return dump_json(j);
}

inline int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Runtime: return 4;
    }
    return 4;
}

} // namespace steerkit::cli
