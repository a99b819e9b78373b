#include "steerkit/steerkit.hpp"

#include <CLI11.hpp>

using namespace steerkit;

int main(int argc, char** argv) {
    CLI::App app{"steerkit: probe, steering-vector and evaluation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    auto with_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "run config (JSON)")->required(); };

    ModelConfig mc;
    std::string model_out;
    auto* init = app.add_subcommand("init-model", "write a randomly initialized model");
    init->add_option("--out", model_out, "weights file")->required();
    init->add_option("--layers", mc.n_layers);
    init->add_option("--dim", mc.hidden_dim);
    init->add_option("--heads", mc.n_heads);
    init->add_option("--max-seq-len", mc.max_seq_len);
    init->add_option("--seed", mc.seed);

    auto* collect = app.add_subcommand("collect-activations", "label prompts and dump last-token activations");
    auto* trainp = app.add_subcommand("train-probes", "fit one linear probe per layer");
    auto* select = app.add_subcommand("select-layer", "pick the layer with the best validation accuracy");
    auto* dsv = app.add_subcommand("compute-dsv", "mean contrast-pair difference at the selected layer");
    for (auto* s : {collect, trainp, select, dsv}) with_config(s);

    std::string prompt;
    auto* gen = app.add_subcommand("generate", "greedy generation without steering");
    with_config(gen);
    gen->add_option("--prompt", prompt)->required();

    std::optional<std::string> steer_prompt, probe_path, dsv_path, reapply, redetect;
    std::optional<double> alpha;
    auto* steer = app.add_subcommand("steer", "conditionally steered generation");
    with_config(steer);
    steer->add_option("--prompt", steer_prompt);
    steer->add_option("--probe", probe_path);
    steer->add_option("--dsv", dsv_path);
    steer->add_option("--alpha", alpha);
    steer->add_option("--reapply", reapply)->check(CLI::IsMember({"once", "every-step"}));
    steer->add_option("--redetect", redetect)->check(CLI::IsMember({"prompt", "step"}));

    std::string task;
    auto* eval = app.add_subcommand("eval", "score outputs");
    with_config(eval);
    eval->add_option("--task", task)->required()->check(CLI::IsMember({"qa", "crows", "judge"}));

    bool svg = false;
    auto* vis = app.add_subcommand("visualize", "2-D PCA of labeled activations");
    with_config(vis);
    vis->add_flag("--svg", svg);

    std::string which;
    auto* exp = app.add_subcommand("experiments", "analysis sweeps");
    with_config(exp);
    exp->add_option("--which", which)->required()->check(CLI::IsMember({"xcat", "dsv-sim", "robustness", "alpha-sweep"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*init) {
            cli::cmd_init_model(mc, model_out);
            return 0;
        }
        auto cfg = load_config(config_path);
        if (*steer) {
            if (probe_path) cfg.steer.probe = *probe_path;
            if (dsv_path) cfg.steer.dsv = *dsv_path;
            if (alpha) cfg.steer.alpha = *alpha;
            if (reapply) cfg.steer.reapply = *reapply == "once" ? Reapply::Once : Reapply::EveryStep;
            if (redetect) cfg.steer.redetect = *redetect == "prompt" ? Redetect::PromptOnly : Redetect::PerStep;
        }
        cli::Workspace ws(std::move(cfg));
        if (*collect) cli::cmd_collect_activations(ws);
        else if (*trainp) cli::cmd_train_probes(ws);
        else if (*select) cli::cmd_select_layer(ws);
        else if (*dsv) cli::cmd_compute_dsv(ws);
        else if (*gen) cli::cmd_generate(ws, prompt);
        else if (*steer) cli::cmd_steer(ws, steer_prompt);
        else if (*eval) {
            if (task == "qa") cli::cmd_eval_qa(ws);
            else if (task == "crows") cli::cmd_eval_crows(ws);
            else cli::cmd_eval_judge(ws);
        } else if (*vis) cli::cmd_visualize(ws, svg);
        else if (*exp) cli::cmd_experiments(ws, which);
        return 0;
    } catch (const Error& e) {
        std::cerr << cli::error_json(e) << "\n";
        return cli::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << cli::error_json(Error(ErrorKind::Runtime, e.what())) << "\n";
        return 4;
    }
}
