#pragma once

#include <cmath>
#include <set>
#include <string>

#include "driftar/numerics/autodiff.hpp"

namespace driftar {

struct ScheduleConfig {
    double alpha0 = 0.95;
    double t_freeze_fraction = 0.8;
    std::size_t total_steps = 20000;
    // Ablation: constant alpha in both phases instead of the linear decay.
    bool fixed_alpha = false;
    double fixed_alpha_value = 0.5;

    void validate() const {
        if (!(alpha0 > 0.0 && alpha0 < 1.0)) {
            throw ConfigError("alpha0 must lie in (0, 1)");
        }
        if (!(t_freeze_fraction > 0.0 && t_freeze_fraction < 1.0)) {
            throw ConfigError("t_freeze_fraction must lie in (0, 1)");
        }
        if (total_steps == 0) {
            throw ConfigError("total_steps must be positive");
        }
    }

    double t_freeze() const { return t_freeze_fraction * static_cast<double>(total_steps); }
};

/// alpha(t) = alpha0 (1 - t / T_freeze) for t <= T_freeze, else 0.
inline double alpha(double t, const ScheduleConfig& cfg) {
    cfg.validate();
    if (!(t >= 0.0 && t <= static_cast<double>(cfg.total_steps))) {
        throw DomainError("schedule position " + std::to_string(t) + " outside [0, " +
                          std::to_string(cfg.total_steps) + "]");
    }
    if (cfg.fixed_alpha) {
        return cfg.fixed_alpha_value;
    }
    const double tf = cfg.t_freeze();
    if (t > tf) {
        return 0.0;
    }
    return cfg.alpha0 - cfg.alpha0 * t / tf;
}

enum class Phase { I = 1, II = 2 };

inline Phase phase_at(std::size_t step, const ScheduleConfig& cfg) {
    return static_cast<double>(step) > cfg.t_freeze() ? Phase::II : Phase::I;
}

struct PhaseState {
    Phase phase = Phase::I;
    std::size_t step = 0;
    std::set<std::string> frozen_names;
};

namespace detail {

inline void require_finite(double v, const char* name) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string("loss component ") + name + " is not finite");
    }
}

}  // namespace detail

/// a (reg + entropy) + (1 - a) drift, with a = alpha(t).
inline double total_loss(double a, double reg, double entropy, double drift) {
    detail::require_finite(reg, "l_reg");
    detail::require_finite(entropy, "l_entropy");
    detail::require_finite(drift, "l_drift");
    return a * (reg + entropy) + (1.0 - a) * drift;
}

inline double total_loss(std::size_t t, const ScheduleConfig& cfg, double reg, double entropy, double drift) {
    return total_loss(alpha(static_cast<double>(t), cfg), reg, entropy, drift);
}

/// Tape form; any component may be absent (nullptr) when it is not trained.
inline Var total_loss(double a, const Var* reg, const Var* entropy, const Var* drift) {
    if (reg) detail::require_finite(reg->value().item(), "l_reg");
    if (entropy) detail::require_finite(entropy->value().item(), "l_entropy");
    if (drift) detail::require_finite(drift->value().item(), "l_drift");
    Var acc{};
    bool have = false;
    auto add = [&](Var v, double w) {
        Var term = ad::scale(v, w);
        acc = have ? ad::add(acc, term) : term;
        have = true;
    };
    if (reg) add(*reg, a);
    if (entropy) add(*entropy, a);
    if (drift) add(*drift, 1.0 - a);
    if (!have) {
        throw StateError("total_loss with no components");
    }
    return acc;
}

}  // namespace driftar
