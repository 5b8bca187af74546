#include <gtest/gtest.h>

#include <cmath>

#include "driftar/spec_decode/speculative.hpp"
#include "tiny.hpp"

using namespace driftar;

namespace {

struct Pair {
    TransformerConfig cfg;
    ModelParams target, draft;
    SpecModels models() const { return SpecModels{&target, cfg, &draft, cfg.draft()}; }
};

Pair make_pair(std::uint64_t seed) {
    Pair p;
    p.cfg.num_layers = 3;
    p.cfg.num_heads = 2;
    p.cfg.model_dim = 16;
    p.cfg.token_dim = 4;
    p.cfg.max_positions = 17;
    p.cfg.draft_layers = 1;
    p.cfg.num_classes = 2;
    Rng rng(seed);
    p.target = init_transformer(p.cfg, rng);
    p.draft = init_draft_from_target(p.target, p.cfg);
    return p;
}

}  // namespace

TEST(TauGlobal, MatchesMeanStdFormula) {
    std::vector<double> e{0.2, 0.4, 0.6, 0.8};
    // mean 0.5, population std sqrt(0.05)
    EXPECT_NEAR(compute_tau_global(e), 0.3 * 0.5 - 0.1 * std::sqrt(0.05), 1e-15);
    EXPECT_THROW(compute_tau_global(std::vector<double>{0.5}), DomainError);
    EXPECT_THROW(compute_tau_global(std::vector<double>{0.5, 1.5}), DomainError);
}

TEST(Threshold, WorkedEmaExample) {
    ThresholdState s = ThresholdState::init(0.16, 0.8);
    EXPECT_NEAR(s.ema_target_entropy, 0.2, 1e-15);
    auto [next, tau] = update_threshold(s, 0.5);
    EXPECT_NEAR(next.ema_target_entropy, 0.23, 1e-15);
    EXPECT_NEAR(tau, 0.184, 1e-15);
    EXPECT_THROW(update_threshold(s, 1.2), DomainError);
    EXPECT_THROW(ThresholdState::init(0.1, 0.0), ConfigError);
}

TEST(Threshold, EmaConvergesToConstantInput) {
    ThresholdState s = ThresholdState::init(0.1);
    for (int i = 0; i < 300; ++i) s = update_threshold(s, 0.7).first;
    // Fixed point of e = 0.9 e + 0.1 x is x.
    EXPECT_NEAR(s.ema_target_entropy, 0.7, 1e-9);
}

TEST(Speculate, StopsAfterLowEntropyProposal) {
    std::vector<double> ent{0.9, 0.8, 0.1, 0.9, 0.9};
    auto step = [&](const std::vector<std::vector<double>>& p) { return DraftStep{{double(p.size())}, ent[p.size()]}; };
    Proposal p = speculate_with(step, 0.5, 5, 10);
    EXPECT_EQ(p.features.size(), 3u);
    EXPECT_EQ(p.stop, StopReason::entropy);
    Proposal q = speculate_with(step, 0.5, 5, 10, false);
    EXPECT_EQ(q.features.size(), 5u);
    EXPECT_EQ(q.stop, StopReason::budget);
    Proposal r = speculate_with(step, 0.0, 5, 2);
    EXPECT_EQ(r.features.size(), 2u);
    EXPECT_EQ(r.stop, StopReason::capacity);
    EXPECT_THROW(speculate_with(step, 0.5, 0, 10), DomainError);
}

TEST(Accept, PrefixRule) {
    std::vector<std::vector<double>> d{{0, 0}, {1, 1}, {0, 0}}, t{{0.1, -0.1}, {1, 1.5}, {0, 0}};
    // errors: 0.1, sqrt(0.25/2) ~ 0.354, 0
    EXPECT_EQ(accept_prefix(d, t, 0.1), 1u);
    EXPECT_EQ(accept_prefix(d, t, 0.36), 3u);
    EXPECT_EQ(accept_prefix(d, t, 0.05), 0u);
    EXPECT_EQ(accept_prefix(d, d, 0.0), 3u);
}

TEST(SpeculativeGeneration, DegenerateConfigReproducesTargetBitExactly) {
    Pair p = make_pair(21);
    for (int c : {0, 1}) {
        ARGeneration ref = generate_autoregressive(p.target, p.cfg, c, 16);
        ThresholdState st = ThresholdState::init(0.2);
        SpecStats stats;
        ARGeneration g = run_speculative_generation(p.models(), c, 16, st, SpecConfig{0.0, 1, true}, stats);
        EXPECT_TRUE(g.features.bit_equal(ref.features));
        EXPECT_EQ(g.entropy, ref.entropy);
        EXPECT_EQ(g.shallow, ref.shallow);
    }
}

TEST(SpeculativeGeneration, SelfDraftAcceptsEverything) {
    // A draft identical to the target proposes exactly what the target would.
    Pair p = make_pair(22);
    SpecModels m{&p.target, p.cfg, &p.target, p.cfg};
    ThresholdState st = ThresholdState::init(0.0);
    SpecStats stats;
    ARGeneration g = run_speculative_generation(m, 1, 16, st, SpecConfig{0.0, 4, false}, stats);
    EXPECT_TRUE(g.features.bit_equal(generate_autoregressive(p.target, p.cfg, 1, 16).features));
    EXPECT_EQ(stats.accepted, stats.proposed);
    EXPECT_DOUBLE_EQ(stats.acceptance_rate(), 1.0);
    // Every round commits max_draft + 1 positions while room remains.
    EXPECT_LT(g.forward_calls, 16u / 2);
}

TEST(SpeculativeGeneration, StatsAreConsistent) {
    Pair p = make_pair(23);
    ThresholdState st = ThresholdState::init(0.1);
    SpecStats stats;
    ARGeneration g = run_speculative_generation(p.models(), 0, 16, st, SpecConfig{0.5, 3, true}, stats);
    EXPECT_EQ(g.features.rows(), 16u);
    EXPECT_EQ(g.entropy.size(), 16u);
    EXPECT_LE(stats.accepted, stats.proposed);
    EXPECT_EQ(stats.target_forward_calls, stats.speculation_rounds);
    EXPECT_EQ(stats.draft_forward_calls, stats.proposed);
    EXPECT_GE(stats.accepted + stats.speculation_rounds, 16u);
}

TEST(SpeculativeGeneration, EmaFollowsCommittedShallowEntropy) {
    Pair p = make_pair(24);
    ThresholdState st = ThresholdState::init(0.1);
    SpecStats stats;
    ARGeneration g = run_speculative_generation(p.models(), 0, 16, st, SpecConfig{0.3, 2, true}, stats);
    ThresholdState replay = ThresholdState::init(0.1);
    for (double e : g.shallow) replay = update_threshold(replay, e).first;
    EXPECT_EQ(st.ema_target_entropy, replay.ema_target_entropy);
}

TEST(SpeculativeGeneration, CapacityError) {
    Pair p = make_pair(25);
    ThresholdState st = ThresholdState::init(0.1);
    SpecStats stats;
    EXPECT_THROW(run_speculative_generation(p.models(), 0, 17, st, SpecConfig{}, stats), CapacityError);
}
