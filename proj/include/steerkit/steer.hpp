#pragma once

// Conditional activation steering: probe the prompt's last-token state at l*
// and, when it reads as biased (yhat < 0.5), add alpha * v at l*.

#include "steerkit/dsv.hpp"
#include "steerkit/probe.hpp"

#include <functional>

namespace steerkit {

enum class Reapply { Once, EveryStep };
enum class Redetect { PromptOnly, PerStep };

inline std::string_view to_string(Reapply r) { return r == Reapply::Once ? "once" : "every-step"; }
inline std::string_view to_string(Redetect r) { return r == Redetect::PromptOnly ? "prompt" : "step"; }

struct SteerPolicy {
    ProbeModel probe;
    SteeringVector dsv;
    double alpha = 1.0;
    Reapply reapply = Reapply::EveryStep;
    Redetect redetect = Redetect::PromptOnly;

    int layer() const { return probe.layer; }

    void validate() const {
        if (probe.layer != dsv.layer)
            fail(ErrorKind::Config, "steer: probe layer " + std::to_string(probe.layer) + " != dsv layer " +
                                        std::to_string(dsv.layer));
        if (probe.dim() != dsv.dim()) fail(ErrorKind::Config, "steer: probe and dsv dimensions differ");
        if (!std::isfinite(alpha)) fail(ErrorKind::Config, "steer: alpha must be finite");
    }
};

struct SteerDecision {
    bool triggered = false;
    double score = 0.0;
    Activation adjusted; // equals the input when not triggered
};

/// a_adj = a + alpha * v, computed in double and rounded once to float.
inline void add_scaled(std::span<float> a, std::span<const double> v, double alpha) {
    if (a.size() != v.size()) fail(ErrorKind::Runtime, "steer: dimension mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(static_cast<double>(a[i]) + alpha * v[i]);
}

inline SteerDecision steer_activation(const SteerPolicy& policy, const Activation& a) {
    SteerDecision d;
    d.score = predict(policy.probe, a);
    d.triggered = d.score < kDecisionThreshold;
    d.adjusted = a;
    if (d.triggered) add_scaled(d.adjusted.values, policy.dsv.v, policy.alpha);
    return d;
}

/// Residual editor implementing the policy during greedy decoding.
class SteeringEditor {
public:
    explicit SteeringEditor(const SteerPolicy& policy) : policy_(policy) { policy_.validate(); }

    void operator()(int step, int layer, std::span<float> residual) {
        if (layer != policy_.layer()) return;
        if (residual.size() != policy_.dsv.dim()) fail(ErrorKind::Runtime, "steer: dimension mismatch with model");
        if (step == 0) {
            prompt_score_ = sigmoid(logit(policy_.probe, residual));
            triggered_ = prompt_score_ < kDecisionThreshold;
            if (triggered_) apply(step, residual);
            adjusted_ = Activation{layer, {residual.begin(), residual.end()}};
            return;
        }
        if (policy_.redetect == Redetect::PerStep) {
            if (sigmoid(logit(policy_.probe, residual)) < kDecisionThreshold) apply(step, residual);
        } else if (triggered_ && policy_.reapply == Reapply::EveryStep) {
            apply(step, residual);
        }
    }

    bool triggered() const { return triggered_; }
    double prompt_score() const { return prompt_score_; }
    const Activation& adjusted() const { return adjusted_; }
    const std::vector<int>& steered_steps() const { return steered_steps_; }

private:
    void apply(int step, std::span<float> residual) {
        add_scaled(residual, policy_.dsv.v, policy_.alpha);
        steered_steps_.push_back(step);
    }

    const SteerPolicy& policy_;
    bool triggered_ = false;
    double prompt_score_ = 0.0;
    Activation adjusted_;
    std::vector<int> steered_steps_;
};

struct SteerOutcome {
    bool triggered = false;
    double prompt_score = 0.0;
    TokenSequence output;
    std::optional<Activation> adjusted; // a_adj at l*, present when triggered
    std::vector<int> steered_steps;
};

inline SteerOutcome steer_generate(const Model& model, const TokenSequence& prompt, const SteerPolicy& policy,
                                   const GenerationSettings& settings = {}) {
    if (prompt.empty()) fail(ErrorKind::Runtime, "steer: empty prompt");
    if (policy.layer() < 1 || policy.layer() > model.n_layers())
        fail(ErrorKind::Runtime, "steer: layer " + std::to_string(policy.layer()) + " out of model range");
    if (policy.dsv.dim() != static_cast<std::size_t>(model.dim()))
        fail(ErrorKind::Runtime, "steer: policy dimension does not match model");
    SteeringEditor editor(policy);
    SteerOutcome out;
    GenerationSettings gs = settings;
    if (gs.max_new_tokens == 0) {
        // detection still runs on the prompt
        auto r = model.forward(prompt, {{policy.layer(), HookAction::read()}});
        const auto d = steer_activation(policy, r.captured.at(policy.layer()));
        out.triggered = d.triggered;
        out.prompt_score = d.score;
        if (d.triggered) out.adjusted = d.adjusted;
        out.output = prompt;
        return out;
    }
    out.output = model.generate_with(prompt, std::ref(editor), gs);
    out.triggered = editor.triggered();
    out.prompt_score = editor.prompt_score();
    if (out.triggered) out.adjusted = editor.adjusted();
    out.steered_steps = editor.steered_steps();
    return out;
}

/// Fraction of (biased) activations whose post-policy state re-probes as unbiased.
inline double flip_rate(const SteerPolicy& policy, std::span<const Activation> biased) {
    if (biased.empty()) fail(ErrorKind::Runtime, "flip_rate: no activations");
    std::size_t flipped = 0;
    for (const auto& a : biased) {
        const auto d = steer_activation(policy, a);
        if (predict(policy.probe, d.adjusted) >= kDecisionThreshold) ++flipped;
    }
    return static_cast<double>(flipped) / static_cast<double>(biased.size());
}

struct AlphaRow {
    std::optional<double> alpha; // nullopt: unsteered base model
    double metric = 0.0;
    std::size_t n_triggered = 0;
    std::vector<TokenSequence> outputs;
};

using OutputMetric = std::function<double(std::span<const TokenSequence> prompts, std::span<const TokenSequence> outputs)>;

/// First row is the base model; then one row per alpha.
inline std::vector<AlphaRow> alpha_sweep(const Model& model, std::span<const TokenSequence> prompts,
                                         const SteerPolicy& policy, std::span<const double> alphas,
                                         const OutputMetric& metric, const GenerationSettings& settings = {}) {
    if (alphas.empty()) fail(ErrorKind::Config, "alpha_sweep: no alphas");
    std::vector<AlphaRow> rows;
    AlphaRow base;
    for (const auto& p : prompts) base.outputs.push_back(model.generate(p, {}, settings));
    base.metric = metric(prompts, base.outputs);
    rows.push_back(std::move(base));
    for (const double a : alphas) {
        SteerPolicy p = policy;
        p.alpha = a;
        AlphaRow row;
        row.alpha = a;
        for (const auto& prompt : prompts) {
            auto o = steer_generate(model, prompt, p, settings);
            row.n_triggered += o.triggered ? 1 : 0;
            row.outputs.push_back(std::move(o.output));
        }
        row.metric = metric(prompts, row.outputs);
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Synthetic analog of the alpha sweep: flip rate per alpha.
inline std::vector<std::pair<double, double>> flip_rate_sweep(const SteerPolicy& policy, std::span<const Activation> biased,
                                                              std::span<const double> alphas) {
    if (alphas.empty()) fail(ErrorKind::Config, "alpha_sweep: no alphas");
    std::vector<std::pair<double, double>> out;
    for (const double a : alphas) {
        SteerPolicy p = policy;
        p.alpha = a;
        out.emplace_back(a, flip_rate(p, biased));
    }
    return out;
}

inline ordered_json to_json(const SteerOutcome& o, const SteerPolicy& policy, std::size_t prompt_len) {
    ordered_json j;
    j["triggered"] = o.triggered;
    j["prompt_score"] = o.prompt_score;
    j["layer"] = policy.layer();
    j["alpha"] = policy.alpha;
    j["reapply"] = to_string(policy.reapply);
    j["redetect"] = to_string(policy.redetect);
    j["output_tokens"] = o.output.tokens;
    j["generation"] = decode(std::span<const int>(o.output.tokens).subspan(std::min(prompt_len, o.output.size())));
    j["steered_steps"] = o.steered_steps;
    j["adjusted"] = o.adjusted ? ordered_json(o.adjusted->values) : ordered_json(nullptr);
    return j;
}

} // namespace steerkit
