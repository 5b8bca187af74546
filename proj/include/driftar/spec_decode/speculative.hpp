#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "driftar/ar_core/generate.hpp"

namespace driftar {

/// 0.3 * mean - 0.1 * population std of the entropy samples.
inline double compute_tau_global(std::span<const double> samples) {
    if (samples.size() < 2) {
        throw DomainError("compute_tau_global needs at least 2 samples, got " + std::to_string(samples.size()));
    }
    double mean = 0.0;
    for (double e : samples) {
        if (!(e >= 0.0 && e <= 1.0)) {
            throw DomainError("entropy sample " + std::to_string(e) + " outside [0, 1]");
        }
        mean += e;
    }
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double e : samples) {
        var += (e - mean) * (e - mean);
    }
    var /= static_cast<double>(samples.size());
    return 0.3 * mean - 0.1 * std::sqrt(var);
}

struct ThresholdState {
    double tau_global = 0.0;
    double gamma = 0.8;
    double ema_target_entropy = 0.0;
    double ema_decay = 0.9;
    double ema_weight = 0.1;

    static ThresholdState init(double tau_global, double gamma = 0.8) {
        if (!(gamma > 0.0)) {
            throw ConfigError("gamma must be positive");
        }
        ThresholdState s;
        s.tau_global = tau_global;
        s.gamma = gamma;
        s.ema_target_entropy = tau_global / gamma;
        return s;
    }

    double tau_c() const { return gamma * ema_target_entropy; }
};

/// EMA step on the target entropy; returns the new state and tau_c.
inline std::pair<ThresholdState, double> update_threshold(ThresholdState state, double target_entropy) {
    if (!(target_entropy >= 0.0 && target_entropy <= 1.0)) {
        throw DomainError("target entropy " + std::to_string(target_entropy) + " outside [0, 1]");
    }
    state.ema_target_entropy = state.ema_decay * state.ema_target_entropy + state.ema_weight * target_entropy;
    return {state, state.tau_c()};
}

enum class StopReason { entropy, budget, capacity };

inline const char* stop_reason_name(StopReason r) {
    switch (r) {
        case StopReason::entropy: return "entropy";
        case StopReason::budget: return "budget";
        case StopReason::capacity: return "capacity";
    }
    return "?";
}

struct DraftStep {
    std::vector<double> feature;
    double entropy = 1.0;  // draft shallow-layer entropy at the new position
};

struct Proposal {
    std::vector<std::vector<double>> features;
    std::vector<double> entropies;
    StopReason stop = StopReason::budget;
};

/// Speculation policy. `step` extends the given proposals by one draft
/// feature. Each proposal is kept; speculation stops once the draft entropy
/// at the newest position drops below tau_c, when max_draft is reached, or
/// when `room` positions are used up.
inline Proposal speculate_with(const std::function<DraftStep(const std::vector<std::vector<double>>&)>& step,
                               double tau_c, std::size_t max_draft, std::size_t room, bool early_stop = true) {
    if (max_draft < 1) {
        throw DomainError("max_draft must be >= 1");
    }
    Proposal p;
    const std::size_t limit = std::min(max_draft, room);
    while (p.features.size() < limit) {
        DraftStep s = step(p.features);
        p.features.push_back(std::move(s.feature));
        p.entropies.push_back(s.entropy);
        if (early_stop && s.entropy < tau_c) {
            p.stop = StopReason::entropy;
            return p;
        }
    }
    p.stop = limit < max_draft ? StopReason::capacity : StopReason::budget;
    return p;
}

/// Longest prefix i with ||draft_j - target_j||_2 / sqrt(d) <= delta for all j < i.
inline std::size_t accept_prefix(const std::vector<std::vector<double>>& draft,
                                 const std::vector<std::vector<double>>& target, double delta) {
    const std::size_t n = std::min(draft.size(), target.size());
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t d = draft[i].size();
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double u = draft[i][c] - target[i][c];
            sq += u * u;
        }
        if (!(std::sqrt(sq) / std::sqrt(static_cast<double>(d)) <= delta)) {
            return i;
        }
    }
    return n;
}

struct SpecStats {
    std::size_t proposed = 0;
    std::size_t accepted = 0;
    std::size_t speculation_rounds = 0;
    std::size_t target_forward_calls = 0;
    std::size_t draft_forward_calls = 0;
    std::size_t stopped_by_entropy = 0;
    std::int64_t wall_ns_spec = 0;
    std::int64_t wall_ns_baseline = 0;

    double acceptance_rate() const {
        return proposed == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(proposed);
    }

    SpecStats& operator+=(const SpecStats& o) {
        proposed += o.proposed;
        accepted += o.accepted;
        speculation_rounds += o.speculation_rounds;
        target_forward_calls += o.target_forward_calls;
        draft_forward_calls += o.draft_forward_calls;
        stopped_by_entropy += o.stopped_by_entropy;
        wall_ns_spec += o.wall_ns_spec;
        wall_ns_baseline += o.wall_ns_baseline;
        return *this;
    }
};

/// A draft/target pair and the decoding knobs.
struct SpecModels {
    const ModelParams* target = nullptr;
    TransformerConfig target_cfg;
    const ModelParams* draft = nullptr;
    TransformerConfig draft_cfg;
};

struct SpecConfig {
    double delta_accept = 0.1;
    std::size_t max_draft = 4;
    bool early_stop = true;
};

namespace detail {

inline Tensor stack_prefix(const std::vector<std::vector<double>>& rows, std::size_t d) {
    std::vector<double> flat;
    flat.reserve(rows.size() * d);
    for (const auto& r : rows) {
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), d}, std::move(flat));
}

inline std::vector<double> row_of(const Tensor& t, std::size_t r) {
    auto s = t.row(r);
    return {s.begin(), s.end()};
}

}  // namespace detail

/// Draft proposal from the current committed prefix.
inline Proposal speculate(const SpecModels& m, const std::vector<std::vector<double>>& prefix, int class_id,
                          double tau_c, std::size_t max_draft, std::size_t R, SpecStats* stats = nullptr,
                          bool early_stop = true) {
    const std::size_t d = m.draft_cfg.token_dim;
    auto step = [&](const std::vector<std::vector<double>>& proposed) {
        std::vector<std::vector<double>> rows = prefix;
        rows.insert(rows.end(), proposed.begin(), proposed.end());
        ARForwardResult res = forward_prefix(*m.draft, m.draft_cfg, detail::stack_prefix(rows, d), class_id);
        if (stats) {
            ++stats->draft_forward_calls;
        }
        const std::size_t last = rows.size();
        return DraftStep{detail::row_of(res.predicted_features, last), last_row_entropy(res, 0, last)};
    };
    return speculate_with(step, tau_c, max_draft, R - prefix.size(), early_stop);
}

struct Verification {
    std::size_t accepted = 0;
    std::vector<std::vector<double>> target_features;  // one per proposal, plus the bonus position
    std::vector<double> penultimate_entropy;
    std::vector<double> shallow_entropy;
};

/// One teacher-forced target pass over prefix + proposals.
inline Verification verify(const SpecModels& m, const std::vector<std::vector<double>>& prefix, int class_id,
                           const std::vector<std::vector<double>>& proposed, double delta_accept,
                           SpecStats* stats = nullptr) {
    if (!(delta_accept >= 0.0)) {
        throw DomainError("delta_accept must be >= 0");
    }
    Verification v;
    if (proposed.empty()) {
        return v;
    }
    const std::size_t d = m.target_cfg.token_dim;
    std::vector<std::vector<double>> rows = prefix;
    rows.insert(rows.end(), proposed.begin(), proposed.end());
    // Predictions for positions k..k+n need inputs up to k+n-1; the extra
    // row predicts the position after the last proposal when there is room.
    if (rows.size() + 1 > m.target_cfg.max_positions) {
        rows.pop_back();
    }
    ARForwardResult res = forward_prefix(*m.target, m.target_cfg, detail::stack_prefix(rows, d), class_id);
    if (stats) {
        ++stats->target_forward_calls;
    }
    const std::size_t k = prefix.size();
    const std::size_t pen = penultimate_layer(m.target_cfg);
    for (std::size_t i = k; i < res.positions(); ++i) {
        v.target_features.push_back(detail::row_of(res.predicted_features, i));
        v.penultimate_entropy.push_back(last_row_entropy(res, pen, i));
        v.shallow_entropy.push_back(last_row_entropy(res, 0, i));
    }
    v.accepted = accept_prefix(proposed, v.target_features, delta_accept);
    return v;
}

/// Draft-verify loop until R features are committed.
///
/// Each round commits the accepted proposals followed by one target feature:
/// the correction at the first rejected position, or the position after a
/// fully accepted proposal. The EMA threshold tracks the target's shallow
/// entropy at every committed position.
inline ARGeneration run_speculative_generation(const SpecModels& m, int class_id, std::size_t R,
                                               ThresholdState& state, const SpecConfig& sc, SpecStats& stats) {
    if (R == 0 || R + 1 > m.target_cfg.max_positions) {
        throw CapacityError("cannot generate " + std::to_string(R) + " tokens with max_positions " +
                            std::to_string(m.target_cfg.max_positions));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t d = m.target_cfg.token_dim;
    const std::size_t calls_before = stats.target_forward_calls;
    std::vector<std::vector<double>> committed;
    ARGeneration out;
    while (committed.size() < R) {
        Proposal p = speculate(m, committed, class_id, state.tau_c(), sc.max_draft, R, &stats, sc.early_stop);
        ++stats.speculation_rounds;
        stats.proposed += p.features.size();
        if (p.stop == StopReason::entropy) {
            ++stats.stopped_by_entropy;
        }
        Verification v = verify(m, committed, class_id, p.features, sc.delta_accept, &stats);
        stats.accepted += v.accepted;
        const std::size_t take = std::min(v.accepted + 1, v.target_features.size());
        for (std::size_t i = 0; i < take && committed.size() < R; ++i) {
            committed.push_back(i < v.accepted ? p.features[i] : v.target_features[i]);
            out.entropy.push_back(v.penultimate_entropy[i]);
            out.shallow.push_back(v.shallow_entropy[i]);
            state = update_threshold(state, v.shallow_entropy[i]).first;
        }
    }
    out.features = detail::stack_prefix(committed, d);
    out.forward_calls = stats.target_forward_calls - calls_before;
    stats.wall_ns_spec +=
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace driftar
