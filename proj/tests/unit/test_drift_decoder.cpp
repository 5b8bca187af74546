#include <gtest/gtest.h>

#include <cmath>

#include "driftar/drift_decoder/decoder.hpp"
#include "driftar/drift_decoder/field.hpp"
#include "driftar/drift_decoder/prior.hpp"
#include "driftar/numerics/grad_check.hpp"

using namespace driftar;

namespace {

double max_abs(const Tensor& t) {
    double m = 0;
    for (double v : t.values()) m = std::max(m, std::abs(v));
    return m;
}

// Direct evaluation of the kernel mean shift for one query, one temperature.
std::vector<double> mean_shift_oracle(const std::vector<double>& x, const Tensor& pts, double tau, double scale) {
    std::vector<double> w(pts.rows());
    double z = 0;
    for (std::size_t j = 0; j < pts.rows(); ++j) {
        double sq = 0;
        for (std::size_t c = 0; c < x.size(); ++c) sq += (pts(j, c) - x[c]) * (pts(j, c) - x[c]);
        w[j] = std::exp(-sq / (tau * scale));
        z += w[j];
    }
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t j = 0; j < pts.rows(); ++j)
        for (std::size_t c = 0; c < x.size(); ++c) out[c] += w[j] / z * (pts(j, c) - x[c]);
    return out;
}

DecoderConfig tiny_decoder() {
    DecoderConfig c;
    c.num_blocks = 2;
    c.num_heads = 2;
    c.model_dim = 8;
    c.token_dim = 3;
    c.positions = 4;
    c.num_classes = 2;
    return c;
}

}  // namespace

TEST(Sigma, EndpointsAndMonotone) {
    SigmaMapConfig cfg;
    EXPECT_EQ(sigma_of_entropy(0.0, cfg), 0.0);
    EXPECT_NEAR(sigma_of_entropy(1.0, cfg), cfg.sigma_max, 1e-12);
    double prev = -1;
    for (int i = 0; i <= 1000; ++i) {
        const double s = sigma_of_entropy(i / 1000.0, cfg);
        EXPECT_GT(s, prev);
        prev = s;
    }
    EXPECT_THROW(sigma_of_entropy(1.01, cfg), DomainError);
    EXPECT_THROW(sigma_of_entropy(-0.1, cfg), DomainError);
    cfg.tau_sigma = 0.0;
    EXPECT_THROW(sigma_of_entropy(0.5, cfg), ConfigError);
}

TEST(Sigma, ClosedFormAtMidpoint) {
    SigmaMapConfig cfg{.sigma_max = 0.7, .tau_sigma = 2.0, .entropy_max = 1.0};
    const double oracle = 0.7 * (std::exp(0.25) - 1.0) / (std::exp(0.5) - 1.0);
    EXPECT_NEAR(sigma_of_entropy(0.5, cfg), oracle, 1e-15);
}

TEST(Sigma, ConstantVarianceAblation) {
    SigmaMapConfig cfg;
    cfg.constant_variance = true;
    for (double e : {0.0, 0.3, 1.0}) EXPECT_EQ(sigma_of_entropy(e, cfg), cfg.sigma_max);
}

TEST(Sigma, PercentileAndSaturation) {
    EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(percentile({1, 2}, 0.25), 1.25);
    EXPECT_THROW(percentile({}, 0.5), DomainError);
    SigmaMapConfig cfg{.entropy_max = 0.8};
    EXPECT_EQ(sigma_saturating(0.95, cfg), sigma_of_entropy(0.8, cfg));
}

TEST(Prior, ScalesNoiseByEntropy) {
    SigmaMapConfig cfg;
    Tensor z = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor e(Shape{2}, std::vector<double>{0.0, 1.0});
    Tensor eps = Tensor::matrix({{5, 5}, {1, -1}});
    Tensor x0 = sample_prior_with(z, e, cfg, eps);
    EXPECT_EQ(x0(0, 0), 1.0);  // zero entropy: exactly the AR feature
    EXPECT_NEAR(x0(1, 0), 3.0 + cfg.sigma_max, 1e-12);
    EXPECT_NEAR(x0(1, 1), 4.0 - cfg.sigma_max, 1e-12);
    EXPECT_THROW(sample_prior_with(z, Tensor(Shape{3}), cfg, eps), DimensionError);
}

TEST(Prior, EmpiricalStdMatchesSigma) {
    SigmaMapConfig cfg;
    Rng rng(3);
    const std::size_t R = 2;
    Tensor z(Shape{R, 20000});
    EntropyMap m{Tensor(Shape{1, 2}, std::vector<double>{0.4, 0.9}), 0};
    Tensor x = sample_prior(z, m, cfg, rng);
    for (std::size_t r = 0; r < R; ++r) {
        double s2 = 0;
        for (std::size_t c = 0; c < 20000; ++c) s2 += x(r, c) * x(r, c);
        EXPECT_NEAR(std::sqrt(s2 / 20000), sigma_of_entropy(m.values[r], cfg), 0.01);
    }
}

TEST(Field, AntiSymmetricOnRandomSets) {
    Rng rng(4);
    KernelConfig k;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = rng.normal_tensor(Shape{5, 3});
        Tensor p = rng.normal_tensor(Shape{7, 3}), q = rng.normal_tensor(Shape{6, 3}, 2.0);
        Tensor a = drifting_field_at(x, p, q, k), b = drifting_field_at(x, q, p, k);
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_LT(std::abs(a[i] + b[i]), 1e-9);
    }
}

TEST(Field, ZeroAtEquilibrium) {
    Rng rng(5);
    Tensor p = rng.normal_tensor(Shape{16, 4});
    EXPECT_LT(max_abs(drifting_field(p, p, KernelConfig{})), 1e-9);
    // Same multiset in a different order.
    Tensor shuffled = p;
    for (std::size_t c = 0; c < 4; ++c) std::swap(shuffled(0, c), shuffled(9, c));
    EXPECT_LT(max_abs(drifting_field(p, shuffled, KernelConfig{})), 1e-9);
}

TEST(Field, MatchesTemperatureAveragedOracle) {
    Rng rng(6);
    KernelConfig k{.temperatures = {0.5, 2.0}, .distance_scale = 3.0};
    Tensor x = rng.normal_tensor(Shape{2, 3}), p = rng.normal_tensor(Shape{5, 3}), q = rng.normal_tensor(Shape{4, 3});
    Tensor v = drifting_field_at(x, p, q, k);
    for (std::size_t i = 0; i < 2; ++i) {
        std::vector<double> xi(x.row(i).begin(), x.row(i).end());
        std::vector<double> want(3, 0.0);
        for (double tau : k.temperatures) {
            auto a = mean_shift_oracle(xi, p, tau, 3.0), b = mean_shift_oracle(xi, q, tau, 3.0);
            for (std::size_t c = 0; c < 3; ++c) want[c] += 0.5 * (a[c] - b[c]);
        }
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(v(i, c), want[c], 1e-13);
    }
}

TEST(Field, AttractionOnlyAblationIgnoresRepulsion) {
    Rng rng(7);
    KernelConfig k{.repulsion = false};
    Tensor x = rng.normal_tensor(Shape{3, 2}), p = rng.normal_tensor(Shape{4, 2});
    Tensor a = drifting_field_at(x, p, rng.normal_tensor(Shape{5, 2}), k);
    Tensor b = drifting_field_at(x, p, Tensor(Shape{0, 2}), k);
    EXPECT_TRUE(a.bit_equal(b));
    // A single attractor pulls exactly toward itself.
    Tensor one = Tensor::matrix({{1.0, -1.0}});
    Tensor v = drifting_field_at(Tensor::matrix({{0.0, 0.0}}), one, Tensor(Shape{0, 2}), k);
    EXPECT_NEAR(v(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(v(0, 1), -1.0, 1e-15);
}

TEST(Field, GroupedFieldUsesOnlyMatchingKeys) {
    Rng rng(8);
    KernelConfig k;
    Tensor gen = rng.normal_tensor(Shape{4, 2}), real = rng.normal_tensor(Shape{6, 2});
    std::vector<std::size_t> gk{0, 1, 0, 1}, rk{1, 0, 0, 1, 1, 0};
    Tensor v = grouped_drifting_field(gen, gk, real, rk, k);
    Tensor g0 = Tensor::matrix({{gen(0, 0), gen(0, 1)}, {gen(2, 0), gen(2, 1)}});
    Tensor r0 = Tensor::matrix({{real(1, 0), real(1, 1)}, {real(2, 0), real(2, 1)}, {real(5, 0), real(5, 1)}});
    Tensor v0 = drifting_field(g0, r0, k);
    EXPECT_NEAR(v(2, 1), v0(1, 1), 1e-14);
    EXPECT_NEAR(v(0, 0), v0(0, 0), 1e-14);
    EXPECT_THROW(grouped_drifting_field(gen, {0, 1, 2, 1}, real, rk, k), DomainError);
}

TEST(DriftLoss, ValueIsMeanSquaredFieldAndGradientHoldsTargetFixed) {
    Rng rng(9);
    KernelConfig k;
    Tensor real = rng.normal_tensor(Shape{6, 3});
    Tensor gen = rng.normal_tensor(Shape{6, 3});
    std::vector<std::size_t> keys(6, 0);
    Tape tape;
    Var g = tape.variable(gen);
    Tensor field;
    Var loss = drift_loss(g, real, k, keys, keys, &field);
    double ms = 0;
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += field(i, c) * field(i, c);
        ms += s / 6;
    }
    EXPECT_NEAR(loss.value().item(), ms, 1e-14);
    tape.backward(loss);
    for (std::size_t i = 0; i < field.numel(); ++i) EXPECT_NEAR(tape.grad(g)[i], -2.0 * field[i] / 6.0, 1e-14);

    // Finite differences with the stop-gradient target frozen at the base point.
    const Tensor target = drift_target(gen, field);
    EXPECT_LT(grad_check([&](Tape&, Var x) { return drift_loss_to(x, target); }, gen, 1e-6), 1e-4);
}

TEST(DriftLoss, ZeroWhenGeneratedEqualsReal) {
    Rng rng(10);
    Tensor real = rng.normal_tensor(Shape{8, 2});
    Tape tape;
    std::vector<std::size_t> keys(8, 0);
    EXPECT_LT(drift_loss(tape.constant(real), real, KernelConfig{}, keys, keys).value().item(), 1e-18);
}

TEST(Decoder, ZeroReadoutGivesIdentityAtInit) {
    const DecoderConfig cfg = tiny_decoder();
    Rng rng(11);
    ModelParams p = init_decoder(cfg, rng);
    Tensor x0 = rng.normal_tensor(Shape{4, 3});
    Tensor e(Shape{4}, std::vector<double>{1.0, 0.2, 0.5, 0.9});
    EXPECT_TRUE(decoder_forward(p, cfg, x0, 1, e).bit_equal(x0));
}

TEST(Decoder, ConditionsOnEntropyAndClass) {
    const DecoderConfig cfg = tiny_decoder();
    Rng rng(12);
    ModelParams p = init_decoder(cfg, rng);
    p.at("out.w") = rng.normal_tensor(Shape{8, 3});
    Tensor x0 = rng.normal_tensor(Shape{4, 3});
    Tensor e1(Shape{4}, std::vector<double>{1.0, 0.2, 0.5, 0.9}), e2 = e1;
    e2[2] = 0.1;
    Tensor a = decoder_forward(p, cfg, x0, 0, e1);
    EXPECT_FALSE(a.bit_equal(decoder_forward(p, cfg, x0, 0, e2)));
    EXPECT_FALSE(a.bit_equal(decoder_forward(p, cfg, x0, 1, e1)));
    EXPECT_THROW(decoder_forward(p, cfg, x0, 2, e1), DomainError);
    EXPECT_THROW(decoder_forward(p, cfg, rng.normal_tensor(Shape{5, 3}), 0, e1), DimensionError);
}

TEST(Decoder, BatchRowsMatchSingleGridCalls) {
    const DecoderConfig cfg = tiny_decoder();
    Rng rng(13);
    ModelParams p = init_decoder(cfg, rng);
    p.at("out.w") = rng.normal_tensor(Shape{8, 3});
    Tensor x = rng.normal_tensor(Shape{8, 3});
    Tensor e(Shape{8}, std::vector<double>{1, .1, .2, .3, 1, .4, .5, .6});
    Tape tape(false);
    Tensor both = decoder_forward(tape, p, cfg, tape.constant(x), {0, 1}, e).value();
    Tensor x1(Shape{4, 3}, std::vector<double>(x.data().begin() + 12, x.data().end()));
    Tensor e1(Shape{4}, std::vector<double>(e.data().begin() + 4, e.data().end()));
    Tensor one = decoder_forward(p, cfg, x1, 1, e1);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(both[12 + i], one[i], 1e-14);
}

TEST(Decoder, GradientCheckThroughPhiFreeDriftLoss) {
    // Decoder-input gradient of the drift loss with a held target.
    const DecoderConfig cfg = tiny_decoder();
    Rng rng(14);
    ModelParams p = init_decoder(cfg, rng);
    p.at("out.w") = rng.normal_tensor(Shape{8, 3}, 0.3);
    Tensor e(Shape{4}, std::vector<double>{1, .3, .6, .9});
    Tensor x0 = rng.normal_tensor(Shape{4, 3});
    Tensor target = rng.normal_tensor(Shape{4, 3});
    auto f = [&](Tape& t, Var x) { return drift_loss_to(decoder_forward(t, p, cfg, x, {1}, e), target); };
    EXPECT_LT(grad_check(f, x0, 1e-6), 1e-4);
}
