#include "helpers.hpp"

using namespace steerkit;

namespace {

SteerPolicy make_policy(int dim, int layer, double alpha, std::uint64_t seed = 1) {
    SteerPolicy p;
    p.probe.layer = layer;
    p.probe.w = random_unit_vector(dim, seed);
    p.dsv.layer = layer;
    p.dsv.v = random_unit_vector(dim, seed + 1);
    p.dsv.n_pairs = 1;
    p.alpha = alpha;
    return p;
}

/// Bias chosen so the prompt's last-token state scores on the requested side.
void force_trigger(SteerPolicy& p, const Model& m, const TokenSequence& prompt, bool trigger) {
    const auto a = m.forward(prompt, {{p.layer(), HookAction::read()}}).captured.at(p.layer());
    p.probe.b = -logit(p.probe, a.values) + (trigger ? -1.0 : 1.0);
}

GenerationSettings tokens(int n) {
    GenerationSettings g;
    g.max_new_tokens = n;
    g.stop_at_eos = false;
    return g;
}

} // namespace

class SteerModel : public ::testing::Test {
protected:
    Model model = Model::random(testutil::small_config(5));
    TokenSequence prompt = encode("Who was bad at math? A. the girl B. the boy C. unknown\nAnswer:");
};

TEST_F(SteerModel, ZeroAlphaIsByteIdentical) {
    auto p = make_policy(64, 2, 0.0);
    force_trigger(p, model, prompt, true);
    const auto steered = steer_generate(model, prompt, p, tokens(12));
    EXPECT_TRUE(steered.triggered);
    EXPECT_EQ(steered.output.tokens, model.generate(prompt, {}, tokens(12)).tokens);
}

TEST_F(SteerModel, UntriggeredIsByteIdentical) {
    auto p = make_policy(64, 2, 50.0);
    force_trigger(p, model, prompt, false);
    const auto steered = steer_generate(model, prompt, p, tokens(12));
    EXPECT_FALSE(steered.triggered);
    EXPECT_FALSE(steered.adjusted.has_value());
    EXPECT_TRUE(steered.steered_steps.empty());
    EXPECT_EQ(steered.output.tokens, model.generate(prompt, {}, tokens(12)).tokens);
}

TEST_F(SteerModel, TriggerMatchesProbeScore) {
    for (int layer = 1; layer <= 4; ++layer)
        for (std::uint64_t s = 0; s < 5; ++s) {
            auto p = make_policy(64, layer, 3.0, 10 + s);
            p.probe.b = 0.3 * (static_cast<double>(s) - 2.0);
            const auto a = model.forward(prompt, {{layer, HookAction::read()}}).captured.at(layer);
            const double yhat = predict(p.probe, a);
            const auto out = steer_generate(model, prompt, p, tokens(3));
            EXPECT_DOUBLE_EQ(out.prompt_score, yhat);
            EXPECT_EQ(out.triggered, yhat < 0.5);
        }
}

TEST_F(SteerModel, AdjustedActivationIsShifted) {
    auto p = make_policy(64, 3, 2.5);
    force_trigger(p, model, prompt, true);
    const auto a = model.forward(prompt, {{3, HookAction::read()}}).captured.at(3);
    const auto out = steer_generate(model, prompt, p, tokens(4));
    ASSERT_TRUE(out.adjusted.has_value());
    for (std::size_t i = 0; i < a.values.size(); ++i)
        EXPECT_EQ(out.adjusted->values[i], static_cast<float>(static_cast<double>(a.values[i]) + 2.5 * p.dsv.v[i]));
    EXPECT_NE(out.output.tokens, model.generate(prompt, {}, tokens(4)).tokens);
}

TEST_F(SteerModel, LayersBelowSteeringAreUntouched) {
    auto p = make_policy(64, 3, 25.0);
    force_trigger(p, model, prompt, true);
    HookMap reads;
    for (int l = 1; l <= 4; ++l) reads[l] = HookAction::read();
    const auto plain = model.forward(prompt, reads).captured;

    SteeringEditor steer(p);
    std::map<int, std::vector<float>> seen;
    model.generate_with(
        prompt,
        [&](int step, int layer, std::span<float> r) {
            steer(step, layer, r);
            if (step == 0) seen[layer].assign(r.begin(), r.end());
        },
        tokens(2));
    ASSERT_TRUE(steer.triggered());
    for (int l = 1; l <= 2; ++l) EXPECT_EQ(seen[l], plain.at(l).values) << "layer " << l;
    EXPECT_NE(seen[3], plain.at(3).values);
}

TEST_F(SteerModel, ReapplyPolicies) {
    auto p = make_policy(64, 2, 4.0);
    force_trigger(p, model, prompt, true);
    p.reapply = Reapply::Once;
    const auto once = steer_generate(model, prompt, p, tokens(6));
    EXPECT_EQ(once.steered_steps, std::vector<int>{0});
    p.reapply = Reapply::EveryStep;
    const auto every = steer_generate(model, prompt, p, tokens(6));
    EXPECT_EQ(every.steered_steps, (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST_F(SteerModel, PerStepRedetection) {
    auto p = make_policy(64, 2, 4.0);
    p.redetect = Redetect::PerStep;
    force_trigger(p, model, prompt, true);
    const auto out = steer_generate(model, prompt, p, tokens(6));
    ASSERT_FALSE(out.steered_steps.empty());
    EXPECT_EQ(out.steered_steps.front(), 0);
    EXPECT_TRUE(std::is_sorted(out.steered_steps.begin(), out.steered_steps.end()));
}

TEST_F(SteerModel, ZeroNewTokensStillDetects) {
    auto p = make_policy(64, 2, 4.0);
    force_trigger(p, model, prompt, true);
    const auto out = steer_generate(model, prompt, p, tokens(0));
    EXPECT_TRUE(out.triggered);
    EXPECT_EQ(out.output.tokens, prompt.tokens);
    EXPECT_TRUE(out.adjusted.has_value());
}

TEST_F(SteerModel, Mismatches) {
    auto p = make_policy(64, 2, 1.0);
    p.dsv.layer = 3;
    EXPECT_THROW(steer_generate(model, prompt, p, tokens(2)), Error);
    auto q = make_policy(32, 2, 1.0);
    EXPECT_THROW(steer_generate(model, prompt, q, tokens(2)), Error);
    auto r = make_policy(64, 9, 1.0);
    EXPECT_THROW(steer_generate(model, prompt, r, tokens(2)), Error);
    auto s = make_policy(64, 2, 1.0);
    EXPECT_THROW(steer_generate(model, TokenSequence{}, s, tokens(2)), Error);
}

TEST_F(SteerModel, AlphaSweepBaseRowFirst) {
    auto p = make_policy(64, 2, 1.0);
    force_trigger(p, model, prompt, true);
    const std::vector<TokenSequence> prompts{prompt};
    const std::vector<double> alphas{0.0, 8.0};
    const auto rows = alpha_sweep(
        model, prompts, p, alphas,
        [](std::span<const TokenSequence>, std::span<const TokenSequence> outs) { return static_cast<double>(outs[0].size()); },
        tokens(5));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_FALSE(rows[0].alpha.has_value());
    EXPECT_EQ(rows[0].outputs[0].tokens, rows[1].outputs[0].tokens);
    EXPECT_EQ(rows[1].n_triggered, 1u);
}

TEST(SteerActivation, ShiftOnlyWhenBiased) {
    auto p = make_policy(2, 1, 2.0);
    p.probe.w = {1.0, 0.0};
    p.dsv.v = {1.0, 0.0};
    const auto biased = steer_activation(p, Activation{1, {-1.0f, 5.0f}});
    EXPECT_TRUE(biased.triggered);
    EXPECT_EQ(biased.adjusted.values, (std::vector<float>{1.0f, 5.0f}));
    const auto fine = steer_activation(p, Activation{1, {0.0f, 5.0f}}); // score exactly 0.5
    EXPECT_FALSE(fine.triggered);
    EXPECT_EQ(fine.adjusted.values, (std::vector<float>{0.0f, 5.0f}));
}

TEST(FlipRate, PlantedClustersFlip) {
    const auto spec = testutil::planted(64, 4.0, 1.0, 90);
    const auto [tr, va] = split(synth_labeled(spec, 500), SplitSpec{0.8, 3});
    SteerPolicy p;
    p.probe = train(tr, va, 1, TrainSettings{});
    p.dsv = compute_dsv(synth_pairs(spec, 110));
    p.alpha = 1.0;
    auto held = spec;
    held.seed = 91;
    const auto biased = synth_sample(held, 500, BiasLabel::Biased);
    EXPECT_GE(flip_rate(p, biased), 0.95);

    const std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0};
    const auto sweep = flip_rate_sweep(p, biased, alphas);
    for (std::size_t i = 1; i < sweep.size(); ++i) EXPECT_GE(sweep[i].second, sweep[i - 1].second);
    EXPECT_LT(sweep.front().second, 0.1);
}
