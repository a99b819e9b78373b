#include "helpers.hpp"

#include <sys/wait.h>

using namespace steerkit;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

RunResult run(const fs::path& dir, const std::string& args) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("'") + STEERKIT_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = testutil::slurp(out);
    r.err = testutil::slurp(err);
    return r;
}

fs::path write_config(const fs::path& dir, const std::string& name, json j) {
    const auto p = dir / name;
    testutil::write_file(p, j.dump(2));
    return p;
}

std::string cfg_arg(const fs::path& p) { return "--config '" + p.string() + "'"; }

json synthetic_section(int dim, int layers, std::vector<std::string> cats, int per_class = 60, bool shared = true) {
    return {{"synthetic",
             {{"dim", dim},
              {"layers", layers},
              {"planted_layer", std::min(2, layers)},
              {"separation", 4.0},
              {"noise", 1.0},
              {"samples_per_class", per_class},
              {"categories", cats},
              {"shared_direction", shared}}}};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream is(testutil::slurp(p));
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::size_t count_lines(const fs::path& p) {
    const auto s = testutil::slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

} // namespace

class CliModel : public ::testing::Test {
protected:
    void SetUp() override {
        const auto r = run(dir.path(), "init-model --out '" + weights().string() + "' --layers 4 --dim 64 --heads 4 --seed 7");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    fs::path weights() const { return dir.path() / "model.stkw"; }
    json base(const std::string& out) const {
        return {{"seed", 3}, {"output_dir", (dir.path() / out).string()}, {"model", {{"weights", weights().string()}}}};
    }
    testutil::TempDir dir{"cli_model"};
};

TEST_F(CliModel, InitModelWritesLoadableWeights) {
    const auto m = Model::load(weights());
    EXPECT_EQ(m.n_layers(), 4);
    EXPECT_EQ(m.dim(), 64);
    const auto again = dir.path() / "again.stkw", other = dir.path() / "other.stkw";
    ASSERT_EQ(run(dir.path(), "init-model --out '" + again.string() + "' --layers 4 --dim 64 --heads 4 --seed 7").code, 0);
    ASSERT_EQ(run(dir.path(), "init-model --out '" + other.string() + "' --layers 4 --dim 64 --heads 4 --seed 8").code, 0);
    EXPECT_EQ(testutil::slurp(again), testutil::slurp(weights()));
    EXPECT_NE(testutil::slurp(other), testutil::slurp(weights()));
}

TEST_F(CliModel, CollectKnowledgeDumpsEveryLayer) {
    auto j = base("run");
    j["data"] = {{"records", (testutil::fixtures() / "knowledge_3.jsonl").string()}};
    j["collect"] = {{"answer_mode", "constrained"}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    const auto r = run(dir.path(), "collect-activations " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    for (int l = 1; l <= 4; ++l) {
        const auto d = read_activation_dump(dir.path() / "run" / ("activations_layer" + std::to_string(l) + ".stka"));
        EXPECT_EQ(d.activations.size(), 3u);
        EXPECT_EQ(d.layer, l);
        EXPECT_EQ(d.dim, 64);
    }
    EXPECT_EQ(count_lines(dir.path() / "run" / "labels.jsonl"), 3u);
    const auto items = read_labeled_dump(dir.path() / "run" / "activations_layer1.stka", dir.path() / "run" / "labels.jsonl");
    for (const auto& it : items) EXPECT_EQ(it.y(), 1);
}

TEST_F(CliModel, CollectIsByteReproducible) {
    for (const char* out : {"a", "b"}) {
        auto j = base(out);
        j["data"] = {{"records", (testutil::fixtures() / "bbq_mixed.jsonl").string()}};
        j["collect"] = {{"answer_mode", "constrained"}, {"shot_modes", {"zero", "few"}}, {"few_shot_k", 2}};
        const auto cfg = write_config(dir.path(), std::string(out) + ".json", j);
        ASSERT_EQ(run(dir.path(), "collect-activations " + cfg_arg(cfg)).code, 0);
    }
    for (const char* f : {"activations_layer1.stka", "activations_layer4.stka", "labels.jsonl"})
        EXPECT_EQ(testutil::slurp(dir.path() / "a" / f), testutil::slurp(dir.path() / "b" / f)) << f;
}

TEST_F(CliModel, ZeroAlphaSteerEqualsGenerate) {
    // probe that always reads "biased": zero weights, negative bias
    ProbeModel probe;
    probe.layer = 2;
    probe.w.assign(64, 0.0);
    probe.b = -1.0;
    save_probe(dir.path() / "probe.json", probe);
    SteeringVector sv{2, random_unit_vector(64, 5), 1, {}, 0};
    save_dsv(dir.path() / "dsv.json", sv);
    auto j = base("run");
    j["generation"] = {{"max_new_tokens", 12}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    const std::string prompt = " --prompt 'The nurse said that'";
    ASSERT_EQ(run(dir.path(), "generate " + cfg_arg(cfg) + prompt).code, 0);
    const auto steer_args = " --probe '" + (dir.path() / "probe.json").string() + "' --dsv '" + (dir.path() / "dsv.json").string() + "'";
    const auto r = run(dir.path(), "steer " + cfg_arg(cfg) + prompt + steer_args + " --alpha 0");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto gen = json::parse(testutil::slurp(dir.path() / "run" / "generation.json"));
    const auto steered = json::parse(testutil::slurp(dir.path() / "run" / "steer_outcome.json"));
    EXPECT_TRUE(steered.at("triggered").get<bool>());
    EXPECT_EQ(steered.at("output_tokens"), gen.at("output_tokens"));

    ASSERT_EQ(run(dir.path(), "steer " + cfg_arg(cfg) + prompt + steer_args + " --alpha 40").code, 0);
    const auto pushed = json::parse(testutil::slurp(dir.path() / "run" / "steer_outcome.json"));
    EXPECT_NE(pushed.at("output_tokens"), gen.at("output_tokens"));
}

TEST_F(CliModel, EvalQaFromGoldOutputs) {
    auto j = base("run");
    j["data"] = {{"records", (testutil::fixtures() / "bbq_110.jsonl").string()},
                 {"outputs", (testutil::fixtures() / "outputs_gold_110.jsonl").string()}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    const auto r = run(dir.path(), "eval --task qa " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = json::parse(testutil::slurp(dir.path() / "run" / "report_qa.json"));
    EXPECT_EQ(rep.at("accuracy").get<double>(), 1.0);
    EXPECT_EQ(rep.at("skipped").get<int>(), 0);
    EXPECT_EQ(rep.at("n_total").get<int>(), 110);
}

TEST_F(CliModel, EvalCrowsAndJudge) {
    auto j = base("run");
    j["data"] = {{"sentence_pairs", (testutil::fixtures() / "sentence_pairs.jsonl").string()},
                 {"generations", (testutil::fixtures() / "generations.jsonl").string()}};
    j["eval"] = {{"judge_template", (testutil::fixtures() / "judge_template.txt").string()}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    ASSERT_EQ(run(dir.path(), "eval --task crows " + cfg_arg(cfg)).code, 0);
    const auto crows = json::parse(testutil::slurp(dir.path() / "run" / "report_crows.json"));
    const double s = crows.at("stereotype_score").get<double>();
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    EXPECT_EQ(crows.at("n_pairs").get<int>(), 4);
    const auto r = run(dir.path(), "eval --task judge " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(count_lines(dir.path() / "run" / "judge_scores.jsonl"), 3u);
}

class CliSynthetic : public ::testing::Test {
protected:
    json base(const std::string& out, json model) const {
        return {{"seed", 11}, {"output_dir", (dir.path() / out).string()}, {"model", std::move(model)}};
    }
    testutil::TempDir dir{"cli_synth"};
};

TEST_F(CliSynthetic, TrainAndSelectFollowCurve) {
    const auto cfg = write_config(dir.path(), "c.json", base("run", synthetic_section(32, 4, {"Age", "SES"})));
    ASSERT_EQ(run(dir.path(), "collect-activations " + cfg_arg(cfg)).code, 0);
    const auto r = run(dir.path(), "train-probes " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    for (int l = 1; l <= 4; ++l) EXPECT_TRUE(fs::exists(dir.path() / "run" / ("probe_layer" + std::to_string(l) + ".json")));
    const auto csv = read_csv(dir.path() / "run" / "layer_accuracy.csv");
    ASSERT_EQ(csv.size(), 5u);
    EXPECT_EQ(csv[0], (std::vector<std::string>{"layer", "accuracy"}));
    int best = 0;
    double best_acc = -1;
    for (std::size_t i = 1; i < csv.size(); ++i)
        if (std::stod(csv[i][1]) > best_acc) best_acc = std::stod(csv[i][1]), best = std::stoi(csv[i][0]);
    const auto sel = run(dir.path(), "select-layer " + cfg_arg(cfg));
    ASSERT_EQ(sel.code, 0) << sel.err;
    EXPECT_EQ(std::stoi(sel.out), best);
    EXPECT_EQ(best, 2);
    const auto j = json::parse(testutil::slurp(dir.path() / "run" / "selected_layer.json"));
    EXPECT_EQ(j.at("layer").get<int>(), best);
}

TEST_F(CliSynthetic, DsvFromStubPairActivations) {
    auto j = base("run", synthetic_section(2, 1, {"Age"}));
    j["data"] = {{"pair_activations", (testutil::fixtures() / "pair_activations.jsonl").string()}};
    j["dsv"] = {{"layer", 1}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    const auto r = run(dir.path(), "compute-dsv " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto sv = load_dsv(dir.path() / "run" / "dsv.json");
    EXPECT_EQ(sv.v, (std::vector<double>{1.5, 1.0}));
    EXPECT_EQ(sv.n_pairs, 2u);
}

TEST_F(CliSynthetic, VisualizeCollinearIsOneAxis) {
    auto j = base("run", synthetic_section(3, 1, {"Age"}));
    j["visualize"] = {{"layer", 1}, {"svg", true}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    fs::create_directories(dir.path() / "run");
    std::vector<LabeledActivation> items;
    std::vector<Activation> acts;
    for (int i = 0; i < 10; ++i) {
        LabeledActivation la;
        la.activation = Activation{1, {static_cast<float>(i), static_cast<float>(-2 * i), static_cast<float>(3 * i)}};
        la.label = i < 5 ? BiasLabel::Biased : BiasLabel::Unbiased;
        acts.push_back(la.activation);
        items.push_back(la);
    }
    write_activation_dump(dir.path() / "run" / "activations_layer1.stka", 1, 3, acts);
    write_label_sidecar(dir.path() / "run" / "labels.jsonl", items);
    const auto r = run(dir.path(), "visualize " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto pca = json::parse(testutil::slurp(dir.path() / "run" / "pca.json"));
    EXPECT_NEAR(pca.at("explained_variance_ratio")[0].get<double>(), 1.0, 1e-9);
    EXPECT_EQ(count_lines(dir.path() / "run" / "pca.csv"), 11u);
    EXPECT_TRUE(fs::exists(dir.path() / "run" / "pca.svg"));
}

TEST_F(CliSynthetic, CrossCategorySingleCategory) {
    auto j = base("run", synthetic_section(32, 2, {"Age"}));
    j["dsv"] = {{"layer", 2}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    ASSERT_EQ(run(dir.path(), "collect-activations " + cfg_arg(cfg)).code, 0);
    const auto r = run(dir.path(), "experiments --which xcat " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = read_csv(dir.path() / "run" / "xcat.csv");
    ASSERT_EQ(csv.size(), 3u);
    EXPECT_EQ(csv[0], (std::vector<std::string>{"train\\eval", "Age"}));
    EXPECT_EQ(csv[1][0], "Age");
    EXPECT_EQ(csv[2][0], "All");
    EXPECT_GE(std::stod(csv[1][1]), 0.9);
    EXPECT_EQ(csv[1][1], csv[2][1]); // same data, same probe
}

TEST_F(CliSynthetic, DsvSimilarityDiagonal) {
    auto j = base("run", synthetic_section(32, 2, {"Age", "SES", "Religion"}));
    j["dsv"] = {{"layer", 2}, {"per_category", 50}};
    const auto cfg = write_config(dir.path(), "c.json", j);
    const auto r = run(dir.path(), "experiments --which dsv-sim " + cfg_arg(cfg));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = read_csv(dir.path() / "run" / "dsv_sim.csv");
    ASSERT_EQ(csv.size(), 4u);
    for (std::size_t i = 1; i < 4; ++i) {
        EXPECT_EQ(csv[i][i], "1");
        for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(csv[i][k], csv[k][i]);
    }
}

TEST_F(CliSynthetic, ConfigErrorsExitTwo) {
    testutil::write_file(dir.path() / "bad.json", R"({"seed": 1, "model": {}, "mystery": 3})");
    const auto r = run(dir.path(), "train-probes " + cfg_arg(dir.path() / "bad.json"));
    EXPECT_EQ(r.code, 2);
    const auto err = json::parse(r.err);
    EXPECT_EQ(err.at("error"), "config");
    EXPECT_FALSE(err.at("message").get<std::string>().empty());

    EXPECT_EQ(run(dir.path(), "train-probes").code, 2);
    EXPECT_EQ(run(dir.path(), "no-such-command").code, 2);
    testutil::write_file(dir.path() / "broken.json", "{not json");
    EXPECT_EQ(run(dir.path(), "select-layer " + cfg_arg(dir.path() / "broken.json")).code, 2);
}

TEST_F(CliSynthetic, MissingArtifactsAreDataErrors) {
    const auto cfg = write_config(dir.path(), "c.json", base("run", synthetic_section(8, 2, {"Age"})));
    const auto r = run(dir.path(), "train-probes " + cfg_arg(cfg));
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(json::parse(r.err).at("error"), "data");
}
