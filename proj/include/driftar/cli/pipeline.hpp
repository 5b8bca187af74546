#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "driftar/cli/config.hpp"
#include "driftar/evaluation/metrics.hpp"
#include "driftar/training/diffusion_trainer.hpp"

// Stages shared by the CLI and the acceptance harness.

namespace driftar {

/// Training corpus and held-out reference grids from one dataset.
struct DataSplit {
    Corpus train;
    std::vector<Tensor> heldout;  // [R x d] each
    std::vector<int> heldout_classes;
};

inline DataSplit split_dataset(const std::vector<LatentGrid>& grids, std::size_t reference) {
    if (reference + 2 > grids.size()) {
        throw ConfigError("dataset of " + std::to_string(grids.size()) + " grids cannot hold out " +
                          std::to_string(reference));
    }
    const std::size_t n_train = grids.size() - reference;
    DataSplit s;
    s.train = Corpus::from(std::vector<LatentGrid>(grids.begin(), grids.begin() + static_cast<std::ptrdiff_t>(n_train)));
    for (std::size_t i = n_train; i < grids.size(); ++i) {
        s.heldout.push_back(grids[i].as_sequence());
        s.heldout_classes.push_back(grids[i].class_id);
    }
    return s;
}

// Independent streams per stage, derived from the run seed.
inline Rng stage_rng(std::uint64_t seed, std::uint64_t stage) {
    Rng base(seed);
    for (std::uint64_t i = 0; i < stage; ++i) {
        base.fork();
    }
    return base.fork();
}

enum Stage : std::uint64_t { kInitTarget = 1, kPretrain, kInitDecoder, kInitEps, kDiffusion, kGenerate, kBench };

inline ModelParams pretrain_stage(const RunConfig& cfg, const Corpus& corpus,
                                  const std::function<void(std::size_t, double)>& on_step = {}) {
    Rng init = stage_rng(cfg.seed, kInitTarget);
    ModelParams target = init_transformer(cfg.model, init);
    Rng rng = stage_rng(cfg.seed, kPretrain);
    pretrain_target(target, cfg.model, corpus, cfg.pretrain, rng, on_step);
    return target;
}

inline TrainModels initial_models(const RunConfig& cfg, const ModelParams& target) {
    Rng init = stage_rng(cfg.seed, kInitDecoder);
    TrainModels m;
    m.target_cfg = cfg.model;
    m.target = target;
    m.target.unfreeze_all();
    m.draft = init_draft_from_target(target, cfg.model);
    m.decoder_cfg = cfg.decoder;
    m.decoder = init_decoder(cfg.decoder, init);
    return m;
}

inline ModelParams diffusion_stage(const RunConfig& cfg, const Corpus& corpus, const TargetCache& cache,
                                   const std::function<void(std::size_t, double)>& on_step = {}) {
    Rng init = stage_rng(cfg.seed, kInitEps);
    ModelParams eps = init_eps_net(cfg.decoder, init);
    Rng rng = stage_rng(cfg.seed, kDiffusion);
    train_diffusion(eps, cfg.decoder, NoiseSchedule::linear(cfg.diffusion.schedule_steps), corpus, cache,
                    cfg.diffusion.steps, cfg.diffusion.batch, cfg.diffusion.optimizer, rng, on_step);
    return eps;
}

/// Everything needed to sample grids.
struct Generator {
    TransformerConfig target_cfg;
    const ModelParams* target = nullptr;
    const ModelParams* draft = nullptr;
    DecoderConfig decoder_cfg;
    const ModelParams* decoder = nullptr;
    const ModelParams* eps_net = nullptr;
    SigmaMapConfig sigma;
    NoiseSchedule schedule = NoiseSchedule::linear();
    SpecConfig spec;
    double tau_global = 0.0;
    double gamma = 0.8;

    std::size_t positions() const { return decoder_cfg.positions; }

    SpecModels spec_models() const {
        require(target, "target");
        require(draft, "draft");
        return SpecModels{target, target_cfg, draft, target_cfg.draft()};
    }

    ARGeneration target_ar(int class_id) const {
        require(target, "target");
        return generate_autoregressive(*target, target_cfg, class_id, positions());
    }

    // A fresh EMA threshold per grid.
    ARGeneration speculative_ar(int class_id, SpecStats& stats) const {
        ThresholdState st = ThresholdState::init(tau_global, gamma);
        return run_speculative_generation(spec_models(), class_id, positions(), st, spec, stats);
    }

    /// One decoder pass from the entropy-scaled prior around z_AR.
    Tensor drift_decode(const ARGeneration& ar, int class_id, Rng& rng, std::size_t* calls = nullptr) const {
        require(decoder, "drifting decoder");
        Tensor entropy(Shape{ar.entropy.size()}, ar.entropy);
        Tensor x0 = sample_prior_with(ar.features, entropy, sigma, rng.normal_tensor(ar.features.shape()));
        Tensor out = decoder_forward(*decoder, decoder_cfg, x0, class_id, entropy);
        if (calls) {
            ++*calls;
        }
        return out;
    }

    Tensor diffusion_decode(const ARGeneration& ar, int class_id, std::size_t steps, Rng& rng,
                            std::size_t* calls = nullptr) const {
        require(eps_net, "diffusion decoder");
        DenoiseTrace tr;
        Tensor out = denoise_sample(*eps_net, decoder_cfg, ar.features, class_id, steps, schedule, rng, &tr);
        if (calls) {
            *calls += tr.network_calls;
        }
        return out;
    }

private:
    static void require(const ModelParams* p, const char* what) {
        if (!p) {
            throw StateError(std::string("generator has no ") + what);
        }
    }
};

/// phi features of whole grids, one flattened row per grid.
inline Tensor grid_features(const PhiEncoder& phi, const std::vector<Tensor>& grids, const std::vector<int>& classes) {
    if (grids.empty()) {
        throw DomainError("grid_features of an empty set");
    }
    const std::size_t R = grids.front().rows(), D = phi.dim();
    Tensor out(Shape{grids.size(), R * D});
    for (std::size_t g = 0; g < grids.size(); ++g) {
        Tensor f = phi.encode(grids[g], classes.at(g));
        std::copy_n(f.data().data(), R * D, out.data().data() + g * R * D);
    }
    return out;
}

inline std::vector<int> balanced_classes(std::size_t n, std::size_t num_classes) {
    std::vector<int> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        c[i] = static_cast<int>(i % num_classes);
    }
    return c;
}

/// Target-only AR features per class; raster generation is deterministic,
/// so one rollout per class serves every sample.
inline std::map<int, ARGeneration> target_rollouts(const Generator& g, std::size_t num_classes) {
    std::map<int, ARGeneration> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
        out[static_cast<int>(c)] = g.target_ar(static_cast<int>(c));
    }
    return out;
}

/// Sample quality: phi-space MMD between decoded grids and the reference set.
struct QualityProbe {
    const PhiEncoder* phi = nullptr;
    Tensor reference;  // grid_features of held-out grids

    double score(const std::vector<Tensor>& grids, const std::vector<int>& classes) const {
        return mmd_auto(grid_features(*phi, grids, classes), reference);
    }
};

struct SweepRow {
    std::string decoder;
    std::size_t steps = 0;
    std::size_t nfe = 0;
    double mmd = 0.0;
    double latency_ns = 0.0;  // mean decoder time per grid
};

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.precision(17);
    out << "decoder,steps,nfe,mmd,latency_ns\n";
    for (const auto& r : rows) {
        out << r.decoder << ',' << r.steps << ',' << r.nfe << ',' << r.mmd << ',' << r.latency_ns << '\n';
    }
}

/// Diffusion at each step count and the drifting decoder at one step, all
/// decoding the same per-class AR rollouts.
inline std::vector<SweepRow> step_sweep(const Generator& g, const std::map<int, ARGeneration>& rollouts,
                                        const QualityProbe& probe, const std::vector<std::size_t>& steps_list,
                                        std::size_t samples, std::uint64_t seed) {
    const auto classes = balanced_classes(samples, rollouts.size());
    std::vector<SweepRow> rows;
    auto run = [&](const std::string& name, std::size_t steps, auto&& decode) {
        Rng rng(seed);
        std::vector<Tensor> grids;
        std::size_t calls = 0;
        const auto t0 = std::chrono::steady_clock::now();
        for (int c : classes) {
            grids.push_back(decode(rollouts.at(c), c, rng, calls));
        }
        const double ns = static_cast<double>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
        rows.push_back(SweepRow{name, steps, calls / samples, probe.score(grids, classes), ns / static_cast<double>(samples)});
    };
    for (std::size_t s : steps_list) {
        run("diffusion", s, [&](const ARGeneration& ar, int c, Rng& rng, std::size_t& calls) {
            return g.diffusion_decode(ar, c, s, rng, &calls);
        });
    }
    run("drifting", 1, [&](const ARGeneration& ar, int c, Rng& rng, std::size_t& calls) {
        return g.drift_decode(ar, c, rng, &calls);
    });
    return rows;
}

/// MMD of the drifting decoder alone.
inline double drift_quality(const Generator& g, const std::map<int, ARGeneration>& rollouts, const QualityProbe& probe,
                            std::size_t samples, std::uint64_t seed) {
    const auto classes = balanced_classes(samples, rollouts.size());
    Rng rng(seed);
    std::vector<Tensor> grids;
    for (int c : classes) {
        grids.push_back(g.drift_decode(rollouts.at(c), c, rng));
    }
    return probe.score(grids, classes);
}

}  // namespace driftar
