#pragma once

#include <functional>
#include <vector>

#include "driftar/ar_core/entropy.hpp"
#include "driftar/numerics/optim.hpp"
#include "driftar/training/corpus.hpp"

namespace driftar {

struct PretrainConfig {
    std::size_t steps = 1500;
    std::size_t batch = 32;
    AdamWConfig optimizer{.lr = 1e-3, .weight_decay = 0.0};
};

/// Plain next-feature pre-training of the target with Smooth-L1.
/// Returns the per-step loss.
inline std::vector<double> pretrain_target(ModelParams& target, const TransformerConfig& cfg, const Corpus& corpus,
                                           const PretrainConfig& pc, Rng& rng,
                                           const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    if (pc.batch == 0) {
        throw ConfigError("pretrain batch must be positive");
    }
    AdamW opt(pc.optimizer);
    std::vector<double> losses;
    losses.reserve(pc.steps);
    for (std::size_t s = 0; s < pc.steps; ++s) {
        const auto idx = sample_batch(rng, corpus.size(), pc.batch);
        const Tensor tok = corpus.batch_tokens(idx);
        Tape tape;
        Var pred = predict(tape, target, cfg, tape.constant(teacher_inputs(tok, pc.batch)), corpus.batch_classes(idx));
        Var loss = regression_loss(pred, tape.constant(tok));
        tape.backward(loss);
        opt.step(target);
        losses.push_back(loss.value().item());
        if (on_step) {
            on_step(s, losses.back());
        }
    }
    return losses;
}

}  // namespace driftar
