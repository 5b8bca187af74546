#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "driftar/data/checkpoint.hpp"
#include "driftar/drift_decoder/decoder.hpp"
#include "driftar/drift_decoder/field.hpp"
#include "driftar/drift_decoder/prior.hpp"
#include "driftar/numerics/optim.hpp"
#include "driftar/training/corpus.hpp"
#include "driftar/training/schedule.hpp"

// Parameter partition: the target is pre-trained and acts as the fixed prior;
// L_reg and L_entropy update the draft, L_drift updates the decoder. After
// T_freeze the draft and target are frozen and only the decoder moves.

namespace driftar {

struct TrainConfig {
    ScheduleConfig schedule{.total_steps = 600};
    std::size_t batch = 16;       // generated grids per step
    std::size_t real_batch = 32;  // real grids feeding the field
    AdamWConfig draft_optimizer{.lr = 1e-3, .weight_decay = 0.0};
    AdamWConfig decoder_optimizer{.lr = 1e-3, .weight_decay = 0.0};
    bool train_draft = true;
    bool train_decoder = true;
    bool entropy_loss = true;
    bool class_grouping = false;  // field groups by (class, position) instead of position
    bool unfrozen_prior = false;  // ablation: target keeps training on L_drift in Phase II
    SigmaMapConfig sigma;
    KernelConfig kernel{.distance_scale = 64.0};
    std::uint64_t seed = 7;

    void validate() const {
        schedule.validate();
        sigma.validate();
        kernel.validate();
        if (batch == 0 || real_batch < 2) {
            throw ConfigError("train batch must be positive and real_batch at least 2");
        }
        if (!train_draft && !train_decoder) {
            throw ConfigError("nothing to train: both draft and decoder disabled");
        }
    }
};

struct MetricRow {
    std::size_t step = 0;
    Phase phase = Phase::I;
    double alpha = 0.0;
    double l_reg = std::numeric_limits<double>::quiet_NaN();
    double l_entropy = std::numeric_limits<double>::quiet_NaN();
    double l_drift = std::numeric_limits<double>::quiet_NaN();
    double l_total = std::numeric_limits<double>::quiet_NaN();
    std::int64_t wall_ns = 0;
};

inline void write_metric_log(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.precision(17);
    out << "step,phase,alpha,l_reg,l_entropy,l_drift,l_total,wall_ns\n";
    auto num = [&](double v) -> std::ostream& {
        if (std::isnan(v)) {
            return out << "nan";
        }
        return out << v;
    };
    for (const auto& r : rows) {
        out << r.step << ',' << (r.phase == Phase::I ? "I" : "II") << ',';
        num(r.alpha) << ',';
        num(r.l_reg) << ',';
        num(r.l_entropy) << ',';
        num(r.l_drift) << ',';
        num(r.l_total) << ',' << r.wall_ns << '\n';
    }
}

struct TrainModels {
    TransformerConfig target_cfg;
    ModelParams target;
    ModelParams draft;
    DecoderConfig decoder_cfg;
    ModelParams decoder;
};

class Trainer {
public:
    /// `models.target` must be the pre-trained target; phi and the
    /// teacher-forced cache are taken from it here unless a cache built from
    /// the same target and corpus is passed in.
    Trainer(TrainModels models, const Corpus& corpus, TrainConfig cfg,
            std::shared_ptr<const TargetCache> cache = nullptr)
        : m_(std::move(models)), corpus_(corpus), cfg_(std::move(cfg)), rng_(cfg_.seed) {
        cfg_.validate();
        m_.target_cfg.validate();
        if (m_.decoder_cfg.positions != corpus_.positions() || m_.decoder_cfg.token_dim != corpus_.d) {
            throw DimensionError("decoder config does not match the corpus grids");
        }
        draft_cfg_ = m_.target_cfg.draft();
        phi_ = PhiEncoder::snapshot(m_.target, m_.target_cfg);
        cache_ = cache ? std::move(cache)
                       : std::make_shared<const TargetCache>(build_target_cache(m_.target, m_.target_cfg, phi_, corpus_));
        if (cache_->z_ar.rows() != corpus_.size() * corpus_.positions()) {
            throw DimensionError("target cache does not cover the corpus");
        }
        draft_opt_ = AdamW(cfg_.draft_optimizer);
        decoder_opt_ = AdamW(cfg_.decoder_optimizer);
        target_opt_ = AdamW(cfg_.decoder_optimizer);
    }

    const TrainModels& models() const noexcept { return m_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    const PhiEncoder& phi() const noexcept { return phi_; }
    const TargetCache& cache() const noexcept { return *cache_; }
    std::shared_ptr<const TargetCache> shared_cache() const noexcept { return cache_; }

    /// Static speculation threshold from the target's shallow-layer entropies.
    double tau_global() const { return tau_global_from(*cache_, corpus_.positions()); }
    const std::vector<MetricRow>& log() const noexcept { return log_; }
    std::size_t step_index() const noexcept { return step_; }
    bool finished() const noexcept { return step_ >= cfg_.schedule.total_steps; }
    std::size_t phase_transitions() const noexcept { return transitions_; }

    PhaseState phase_state() const {
        PhaseState s;
        s.step = step_;
        s.phase = frozen_ ? Phase::II : Phase::I;
        for (const auto& n : m_.target.frozen()) s.frozen_names.insert("target." + n);
        for (const auto& n : m_.draft.frozen()) s.frozen_names.insert("draft." + n);
        return s;
    }

    void run(const std::function<void(const MetricRow&)>& on_step = {}) {
        while (!finished()) {
            const MetricRow& r = step();
            if (on_step) {
                on_step(r);
            }
        }
    }

    const MetricRow& step() {
        if (finished()) {
            throw StateError("training already reached " + std::to_string(cfg_.schedule.total_steps) + " steps");
        }
        const auto t0 = std::chrono::steady_clock::now();
        const Phase ph = phase_at(step_, cfg_.schedule);
        if (ph == Phase::II && !frozen_) {
            enter_phase_two();
        }
        MetricRow row;
        row.step = step_;
        row.phase = ph;
        row.alpha = alpha(static_cast<double>(step_), cfg_.schedule);

        const bool do_draft = cfg_.train_draft && ph == Phase::I;
        const bool do_drift = cfg_.train_decoder;
        const bool live_prior = do_drift && cfg_.unfrozen_prior && ph == Phase::II;
        if (do_draft || do_drift) {
            const std::size_t B = cfg_.batch, R = corpus_.positions(), d = corpus_.d;
            const auto idx = sample_batch(rng_, corpus_.size(), B);
            const auto cls = corpus_.batch_classes(idx);
            Tape tape;
            std::optional<Var> reg, ent, drift;
            if (do_draft) {
                TrunkTrace tr;
                Var pred = predict(tape, m_.draft, draft_cfg_, tape.constant(teacher_inputs(corpus_.batch_tokens(idx), B)),
                                   cls, &tr);
                reg = regression_loss(pred, tape.constant(corpus_.gather(cache_->z_ar, idx)));
                if (cfg_.entropy_loss) {
                    ent = entropy_loss(tr.attention[penultimate_layer(draft_cfg_)], B, draft_cfg_.num_heads);
                }
            }
            if (do_drift) {
                Var z{};
                Tensor entropy;
                if (live_prior) {
                    TrunkTrace tr;
                    z = predict(tape, m_.target, m_.target_cfg,
                                tape.constant(teacher_inputs(corpus_.batch_tokens(idx), B)), cls, &tr);
                    entropy = position_entropy(tr.attention[penultimate_layer(m_.target_cfg)], B,
                                               m_.target_cfg.num_heads, 1.0)
                                  .value();
                } else {
                    z = tape.constant(corpus_.gather(cache_->z_ar, idx));
                    entropy = corpus_.gather(cache_->entropy, idx);
                }
                const Tensor eps = rng_.normal_tensor(Shape{B * R, d});
                const Tensor noise = sample_prior_with(Tensor(Shape{B * R, d}), entropy, cfg_.sigma, eps);
                Var x_hat = decoder_forward(tape, m_.decoder, m_.decoder_cfg, ad::add(z, tape.constant(noise)), cls,
                                            entropy);
                Var phi_gen = phi_.encode(tape, x_hat, cls);
                const auto ridx = sample_batch(rng_, corpus_.size(), cfg_.real_batch);
                const Tensor phi_real = corpus_.gather(cache_->phi_real, ridx);
                drift = drift_loss(phi_gen, phi_real, cfg_.kernel, keys(cls), keys(corpus_.batch_classes(ridx)));
            }
            Var total = total_loss(row.alpha, reg ? &*reg : nullptr, ent ? &*ent : nullptr, drift ? &*drift : nullptr);
            tape.backward(total);
            if (do_draft) draft_opt_.step(m_.draft);
            if (do_drift) decoder_opt_.step(m_.decoder);
            if (live_prior) target_opt_.step(m_.target);
            if (reg) row.l_reg = reg->value().item();
            if (ent) row.l_entropy = ent->value().item();
            if (drift) row.l_drift = drift->value().item();
            row.l_total = total.value().item();
        }
        ++step_;
        row.wall_ns =
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
        log_.push_back(row);
        return log_.back();
    }

    /// Models, optimizer moments, generator and step counter in one file.
    void save(const std::string& path, const std::map<std::string, double>& extra = {}) const {
        ModelParams all;
        merge_prefixed(all, "target.", m_.target);
        merge_prefixed(all, "draft.", m_.draft);
        merge_prefixed(all, "decoder.", m_.decoder);
        draft_opt_.export_state(all, "opt.draft.");
        decoder_opt_.export_state(all, "opt.decoder.");
        target_opt_.export_state(all, "opt.target.");
        CheckpointMeta meta;
        meta.scalars["step"] = static_cast<double>(step_);
        meta.scalars["phase"] = frozen_ ? 2.0 : 1.0;
        meta.scalars["total_steps"] = static_cast<double>(cfg_.schedule.total_steps);
        meta.scalars["unfrozen_prior"] = cfg_.unfrozen_prior ? 1.0 : 0.0;
        meta.scalars["tau_global"] = tau_global();
        for (const auto& [k, v] : extra) meta.scalars[k] = v;
        meta.rngs["train"] = rng_.state();
        save_checkpoint(path, all, meta);
    }

    /// Continues a run saved by save(). The trainer must have been built
    /// from the same pre-trained target and configuration.
    void resume(const std::string& path) {
        Checkpoint ck = load_checkpoint(path);
        const auto& meta = ck.meta;
        const auto step = static_cast<std::size_t>(meta.scalar("step"));
        if (meta.scalar("total_steps") != static_cast<double>(cfg_.schedule.total_steps) ||
            meta.scalar("unfrozen_prior") != (cfg_.unfrozen_prior ? 1.0 : 0.0)) {
            throw StateError(path + ": checkpoint was written under a different schedule or prior setting");
        }
        const bool frozen = meta.scalar("phase") == 2.0;
        const bool expect_frozen = step > 0 && phase_at(step - 1, cfg_.schedule) == Phase::II;
        if (frozen != expect_frozen || step > cfg_.schedule.total_steps) {
            throw StateError(path + ": phase " + (frozen ? "II" : "I") + " is inconsistent with step " +
                             std::to_string(step));
        }
        ModelParams draft = extract_prefixed(ck.params, "draft.");
        if (frozen != (draft.frozen().size() == draft.size())) {
            throw StateError(path + ": draft freeze flags disagree with the recorded phase");
        }
        m_.target = extract_prefixed(ck.params, "target.");
        m_.draft = std::move(draft);
        m_.decoder = extract_prefixed(ck.params, "decoder.");
        draft_opt_.import_state(ck.params, "opt.draft.");
        decoder_opt_.import_state(ck.params, "opt.decoder.");
        target_opt_.import_state(ck.params, "opt.target.");
        rng_.set_state(meta.rng("train"));
        step_ = step;
        frozen_ = frozen;
        log_.clear();
    }

private:
    void enter_phase_two() {
        m_.draft.freeze_all();
        if (!cfg_.unfrozen_prior) {
            m_.target.freeze_all();
        }
        frozen_ = true;
        ++transitions_;
    }

    std::vector<std::size_t> keys(const std::vector<int>& cls) const {
        const std::size_t R = corpus_.positions();
        if (cfg_.class_grouping) {
            return class_position_keys(cls, R);
        }
        std::vector<std::size_t> k;
        k.reserve(cls.size() * R);
        for (std::size_t b = 0; b < cls.size(); ++b) {
            for (std::size_t r = 0; r < R; ++r) {
                k.push_back(r);
            }
        }
        return k;
    }

    TrainModels m_;
    const Corpus& corpus_;
    TrainConfig cfg_;
    TransformerConfig draft_cfg_;
    PhiEncoder phi_;
    std::shared_ptr<const TargetCache> cache_;
    AdamW draft_opt_, decoder_opt_, target_opt_;
    Rng rng_;
    std::size_t step_ = 0;
    bool frozen_ = false;
    std::size_t transitions_ = 0;
    std::vector<MetricRow> log_;
};

}  // namespace driftar
