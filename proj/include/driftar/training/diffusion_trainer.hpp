#pragma once

#include <functional>
#include <vector>

#include "driftar/baseline_diffusion/diffusion.hpp"
#include "driftar/numerics/optim.hpp"
#include "driftar/training/corpus.hpp"

namespace driftar {

/// Noise-prediction training of the baseline decoder on the same cached
/// z_AR the drifting decoder sees. Returns the per-step loss.
inline std::vector<double> train_diffusion(ModelParams& eps_net, const DecoderConfig& cfg, const NoiseSchedule& sched,
                                           const Corpus& corpus, const TargetCache& cache, std::size_t steps,
                                           std::size_t batch, const AdamWConfig& opt_cfg, Rng& rng,
                                           const std::function<void(std::size_t, double)>& on_step = {}) {
    if (batch == 0) {
        throw ConfigError("diffusion batch must be positive");
    }
    AdamW opt(opt_cfg);
    std::vector<double> losses;
    losses.reserve(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        const auto idx = sample_batch(rng, corpus.size(), batch);
        Tape tape;
        Var loss = denoise_loss(tape, eps_net, cfg, sched, corpus.batch_tokens(idx), corpus.gather(cache.z_ar, idx),
                                corpus.batch_classes(idx), rng);
        tape.backward(loss);
        opt.step(eps_net);
        losses.push_back(loss.value().item());
        if (on_step) {
            on_step(s, losses.back());
        }
    }
    return losses;
}

}  // namespace driftar
