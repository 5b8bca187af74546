#include <gtest/gtest.h>

#include <cmath>

#include "driftar/baseline_diffusion/diffusion.hpp"
#include "driftar/numerics/grad_check.hpp"
#include "driftar/numerics/optim.hpp"

using namespace driftar;

namespace {

DecoderConfig eps_cfg() {
    DecoderConfig c;
    c.num_blocks = 1;
    c.num_heads = 2;
    c.model_dim = 8;
    c.token_dim = 3;
    c.positions = 4;
    c.num_classes = 2;
    return c;
}

}  // namespace

TEST(NoiseScheduleTest, LinearBetasAndCumulativeProduct) {
    NoiseSchedule s = NoiseSchedule::linear(5, 0.1, 0.5);
    const std::vector<double> betas{0.1, 0.2, 0.3, 0.4, 0.5};
    double prod = 1;
    for (std::size_t t = 0; t < 5; ++t) {
        EXPECT_NEAR(s.betas[t], betas[t], 1e-15);
        prod *= 1 - betas[t];
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-15);
    }
    EXPECT_THROW(s.alpha_bar(5), DomainError);
    EXPECT_THROW(NoiseSchedule::linear(0), ConfigError);
}

TEST(Diffuse, ClosedForm) {
    Tensor x = Tensor::matrix({{1, 2}}), eps = Tensor::matrix({{-1, 0.5}});
    Tensor y = diffuse_with(x, 0.64, eps);
    EXPECT_NEAR(y[0], 0.8 - 0.6, 1e-15);
    EXPECT_NEAR(y[1], 1.6 + 0.3, 1e-15);
    EXPECT_THROW(diffuse_with(x, 0.5, Tensor(Shape{2, 1})), DimensionError);
}

TEST(Strided, EndsAtLastStepAndIsIncreasing) {
    NoiseSchedule s = NoiseSchedule::linear(100);
    EXPECT_EQ(strided_steps(1, s), (std::vector<std::size_t>{99}));
    EXPECT_EQ(strided_steps(4, s), (std::vector<std::size_t>{24, 49, 74, 99}));
    auto all = strided_steps(100, s);
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
    EXPECT_THROW(strided_steps(0, s), DomainError);
    EXPECT_THROW(strided_steps(101, s), DomainError);
}

TEST(DenoiseSample, OneNetworkCallPerStep) {
    const DecoderConfig cfg = eps_cfg();
    Rng rng(1);
    ModelParams p = init_eps_net(cfg, rng);
    NoiseSchedule s = NoiseSchedule::linear(20);
    Tensor z = rng.normal_tensor(Shape{4, 3});
    for (std::size_t steps : {1u, 5u, 20u}) {
        DenoiseTrace tr;
        Rng r(2);
        Tensor x = denoise_sample(p, cfg, z, 0, steps, s, r, &tr);
        EXPECT_EQ(tr.network_calls, steps);
        EXPECT_EQ(x.shape(), z.shape());
    }
}

TEST(DenoiseSample, ZeroNoisePredictionRescalesStartingPoint) {
    // A freshly initialised eps-net predicts zero noise, so one step gives x_T / sqrt(abar_T).
    const DecoderConfig cfg = eps_cfg();
    Rng rng(3);
    ModelParams p = init_eps_net(cfg, rng);
    NoiseSchedule s = NoiseSchedule::linear(10);
    Tensor z = rng.normal_tensor(Shape{4, 3});
    Rng a(4), b(4);
    Tensor out = denoise_sample(p, cfg, z, 1, 1, s, a);
    Tensor start = b.normal_tensor(z.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], start[i] / std::sqrt(s.alpha_bar(9)), 1e-13);
}

TEST(EpsNet, GradientCheckWrtNoisyInput) {
    const DecoderConfig cfg = eps_cfg();
    Rng rng(5);
    ModelParams p = init_eps_net(cfg, rng);
    for (auto& [name, t] : p.tensors())
        if (name.rfind("out.", 0) == 0) t = rng.normal_tensor(t.shape(), 0.3);
    Tensor z = rng.normal_tensor(Shape{4, 3});
    auto f = [&](Tape& tape, Var x) {
        return ad::mean(ad::square(eps_net_forward(tape, p, cfg, x, tape.constant(z), {1}, {7})));
    };
    EXPECT_LT(grad_check(f, rng.normal_tensor(Shape{4, 3}), 1e-6), 1e-4);
}

TEST(EpsNet, TrainingReducesDenoiseLoss) {
    const DecoderConfig cfg = eps_cfg();
    Rng rng(6);
    ModelParams p = init_eps_net(cfg, rng);
    NoiseSchedule s = NoiseSchedule::linear(20);
    Tensor x = rng.normal_tensor(Shape{8, 3}), z = x;
    AdamW opt(AdamWConfig{.lr = 3e-3, .weight_decay = 0.0});
    auto eval = [&] {
        Rng r(99);
        double acc = 0;
        for (int i = 0; i < 20; ++i) {
            Tape tape(false);
            acc += denoise_loss(tape, p, cfg, s, x, z, {0, 1}, r).value().item();
        }
        return acc / 20;
    };
    const double before = eval();
    for (int i = 0; i < 150; ++i) {
        Tape tape;
        tape.backward(denoise_loss(tape, p, cfg, s, x, z, {0, 1}, rng));
        opt.step(p);
    }
    EXPECT_LT(eval(), 0.8 * before);
}

TEST(EpsNet, ShapeAndClassErrors) {
    const DecoderConfig cfg = eps_cfg();
    Rng rng(7);
    ModelParams p = init_eps_net(cfg, rng);
    Tape tape(false);
    Var x = tape.constant(Tensor(Shape{4, 3}));
    EXPECT_THROW(eps_net_forward(tape, p, cfg, x, tape.constant(Tensor(Shape{4, 2})), {0}, {0}), DimensionError);
    EXPECT_THROW(eps_net_forward(tape, p, cfg, x, x, {0}, {0, 1}), DimensionError);
    EXPECT_THROW(eps_net_forward(tape, p, cfg, x, x, {3}, {0}), DomainError);
}
