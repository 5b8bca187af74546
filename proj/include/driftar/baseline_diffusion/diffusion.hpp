#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "driftar/drift_decoder/decoder.hpp"

// Multi-step noise-prediction baseline conditioned on z_AR.
//
// The network sees concat(x_t, z_AR) per position and a per-grid condition
// silu(class_embedding + time_mlp(sinusoid(t))) feeding the same AdaLN block
// stack as the drifting decoder.

namespace driftar {

struct NoiseSchedule {
    std::size_t num_train_steps = 100;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(std::size_t steps = 100, double beta_start = 1e-4, double beta_end = 0.02) {
        if (steps < 1) {
            throw ConfigError("noise schedule needs at least one step");
        }
        NoiseSchedule s;
        s.num_train_steps = steps;
        double prod = 1.0;
        for (std::size_t t = 0; t < steps; ++t) {
            const double beta =
                steps == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(steps - 1);
            s.betas.push_back(beta);
            prod *= 1.0 - beta;
            s.alpha_bars.push_back(prod);
        }
        return s;
    }

    double alpha_bar(std::size_t t) const {
        if (t >= num_train_steps) {
            throw DomainError("diffusion step " + std::to_string(t) + " outside [0, " +
                              std::to_string(num_train_steps) + ")");
        }
        return alpha_bars[t];
    }
};

/// x_t = sqrt(abar) x + sqrt(1 - abar) eps
inline Tensor diffuse_with(const Tensor& x, double alpha_bar, const Tensor& eps) {
    if (x.shape() != eps.shape()) {
        throw DimensionError("diffuse: x " + shape_str(x.shape()) + " vs eps " + shape_str(eps.shape()));
    }
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = a * x[i] + b * eps[i];
    }
    return out;
}

inline Tensor diffuse(const Tensor& x, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
    return diffuse_with(x, sched.alpha_bar(t), eps);
}

inline ModelParams init_eps_net(const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t D = cfg.model_dim, d = cfg.token_dim;
    ModelParams p;
    p.add("in.w", init_linear(rng, 2 * d, D));
    p.add("in.b", Tensor(Shape{1, D}));
    p.add("pos", init_normal(rng, Shape{cfg.positions, D}, 0.1));
    p.add("cond.class", init_normal(rng, Shape{cfg.num_classes, D}, 0.5));
    p.add("cond.time.w1", init_linear(rng, D, D));
    p.add("cond.time.b1", Tensor(Shape{1, D}));
    p.add("cond.time.w2", init_linear(rng, D, D));
    p.add("cond.time.b2", Tensor(Shape{1, D}));
    init_adaln_stack(p, cfg, rng);
    return p;
}

// Sinusoidal embedding of a diffusion step, width D.
inline Tensor time_features(std::size_t t, std::size_t D) {
    Tensor out(Shape{1, D});
    const std::size_t half = D / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::sin(static_cast<double>(t) * freq);
        out[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return out;
}

/// eps prediction for a batch: x_t, z_ar [batch*R x d]; one step per grid.
inline Var eps_net_forward(Tape& tape, ModelParams& params, const DecoderConfig& cfg, Var x_t, Var z_ar,
                           const std::vector<int>& class_ids, const std::vector<std::size_t>& steps) {
    const std::size_t B = class_ids.size(), R = cfg.positions, D = cfg.model_dim;
    if (B == 0 || steps.size() != B || x_t.rows() != B * R || x_t.cols() != cfg.token_dim ||
        z_ar.value().shape() != x_t.value().shape()) {
        throw DimensionError("eps_net_forward: x_t " + shape_str(x_t.value().shape()) + ", z_ar " +
                             shape_str(z_ar.value().shape()) + " for " + std::to_string(B) + " grids");
    }
    Tensor tf(Shape{B, D});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor f = time_features(steps[b], D);
        std::copy_n(f.data().data(), D, tf.data().data() + b * D);
    }
    Var te = ad::silu(ad::add_row(ad::matmul(tape.constant(std::move(tf)), param(tape, params, "cond.time.w1")),
                                  param(tape, params, "cond.time.b1")));
    te = ad::add_row(ad::matmul(te, param(tape, params, "cond.time.w2")), param(tape, params, "cond.time.b2"));
    std::vector<std::size_t> cls(class_ids.begin(), class_ids.end());
    for (std::size_t c : cls) {
        if (c >= cfg.num_classes) {
            throw DomainError("eps-net class id " + std::to_string(c) + " out of range");
        }
    }
    Var cond = ad::silu(ad::add(ad::gather_rows(param(tape, params, "cond.class"), std::move(cls)), te));
    cond = ad::repeat_rows(cond, R);

    Var h = ad::add_row(ad::matmul(ad::concat_cols(x_t, z_ar), param(tape, params, "in.w")), param(tape, params, "in.b"));
    h = ad::add_tiled(h, param(tape, params, "pos"));
    return adaln_stack(tape, params, cfg, h, cond, B);
}

/// ||eps - eps_theta(x_t | t, z_AR)||^2 averaged over entries, with fresh t and eps.
inline Var denoise_loss(Tape& tape, ModelParams& params, const DecoderConfig& cfg, const NoiseSchedule& sched,
                        const Tensor& x, const Tensor& z_ar, const std::vector<int>& class_ids, Rng& rng) {
    const std::size_t B = class_ids.size(), per = cfg.positions * cfg.token_dim;
    std::vector<std::size_t> steps(B);
    Tensor eps = rng.normal_tensor(x.shape());
    Tensor x_t(x.shape());
    for (std::size_t b = 0; b < B; ++b) {
        steps[b] = static_cast<std::size_t>(rng.below(sched.num_train_steps));
        const double ab = sched.alpha_bar(steps[b]);
        const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            x_t[i] = a * x[i] + s * eps[i];
        }
    }
    Var pred = eps_net_forward(tape, params, cfg, tape.constant(std::move(x_t)), tape.constant(z_ar), class_ids, steps);
    return ad::mean(ad::square(ad::sub(pred, tape.constant(std::move(eps)))));
}

/// Evenly strided sub-schedule of `steps` indices ending at num_train_steps - 1.
inline std::vector<std::size_t> strided_steps(std::size_t steps, const NoiseSchedule& sched) {
    if (steps < 1) {
        throw DomainError("sampling needs at least one step");
    }
    if (steps > sched.num_train_steps) {
        throw DomainError("cannot sample with " + std::to_string(steps) + " steps from a " +
                          std::to_string(sched.num_train_steps) + "-step schedule");
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i <= steps; ++i) {
        out.push_back(i * sched.num_train_steps / steps - 1);
    }
    return out;
}

struct DenoiseTrace {
    std::size_t network_calls = 0;
};

/// Ancestral sampling on the strided sub-schedule, starting from N(0, I).
inline Tensor denoise_sample(const ModelParams& params, const DecoderConfig& cfg, const Tensor& z_ar, int class_id,
                             std::size_t steps, const NoiseSchedule& sched, Rng& rng, DenoiseTrace* trace = nullptr) {
    const std::vector<std::size_t> sub = strided_steps(steps, sched);
    auto& mut = const_cast<ModelParams&>(params);  // grad-free tape never writes through params
    Tensor x = rng.normal_tensor(z_ar.shape());
    for (std::size_t i = sub.size(); i-- > 0;) {
        const std::size_t t = sub[i];
        Tape tape(false);
        Tensor eps = eps_net_forward(tape, mut, cfg, tape.constant(x), tape.constant(z_ar), {class_id}, {t}).value();
        if (trace) {
            ++trace->network_calls;
        }
        const double ab_t = sched.alpha_bar(t);
        const double ab_s = i > 0 ? sched.alpha_bar(sub[i - 1]) : 1.0;
        Tensor x0(x.shape());
        for (std::size_t j = 0; j < x.numel(); ++j) {
            x0[j] = (x[j] - std::sqrt(1.0 - ab_t) * eps[j]) / std::sqrt(ab_t);
        }
        if (i == 0) {
            x = std::move(x0);
            break;
        }
        const double a_ts = ab_t / ab_s;
        const double b_ts = 1.0 - a_ts;
        const double c0 = std::sqrt(ab_s) * b_ts / (1.0 - ab_t);
        const double ct = std::sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t);
        const double sd = std::sqrt(b_ts * (1.0 - ab_s) / (1.0 - ab_t));
        for (std::size_t j = 0; j < x.numel(); ++j) {
            x[j] = c0 * x0[j] + ct * x[j] + sd * rng.normal();
        }
    }
    return x;
}

}  // namespace driftar
