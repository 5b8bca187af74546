#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "driftar/ar_core/entropy.hpp"
#include "driftar/numerics/rng.hpp"

namespace driftar {

struct SigmaMapConfig {
    double sigma_max = 0.5;
    double tau_sigma = 2.0;
    double entropy_max = 1.0;
    bool constant_variance = false;  // prior ablation: sigma_max everywhere

    void validate() const {
        if (!(sigma_max > 0.0) || !(tau_sigma > 0.0) || !(entropy_max > 0.0)) {
            throw ConfigError("sigma_max, tau_sigma and entropy_max must be positive");
        }
    }
};

/// sigma(e) = sigma_max * (exp(e / tau) - 1) / (exp(e_max / tau) - 1)
inline double sigma_of_entropy(double e, const SigmaMapConfig& cfg) {
    cfg.validate();
    if (!(e >= 0.0 && e <= cfg.entropy_max)) {
        throw DomainError("entropy " + std::to_string(e) + " outside [0, " + std::to_string(cfg.entropy_max) + "]");
    }
    if (cfg.constant_variance) {
        return cfg.sigma_max;
    }
    return cfg.sigma_max * std::expm1(e / cfg.tau_sigma) / std::expm1(cfg.entropy_max / cfg.tau_sigma);
}

// Entropies above entropy_max (possible when it is set from a percentile)
// saturate at sigma_max.
inline double sigma_saturating(double e, const SigmaMapConfig& cfg) {
    return sigma_of_entropy(std::min(e, cfg.entropy_max), cfg);
}

/// q-quantile (linear interpolation) of the samples, used to set entropy_max
/// from training entropies.
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) {
        throw DomainError("percentile of an empty sample");
    }
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// x0 = z_AR + sigma(E) * eps with eps ~ N(0, I) drawn per position.
inline Tensor sample_prior_with(const Tensor& z_ar, const Tensor& entropy, const SigmaMapConfig& cfg,
                                const Tensor& eps) {
    const std::size_t R = z_ar.rows(), d = z_ar.cols();
    if (entropy.numel() != R || eps.numel() != z_ar.numel()) {
        throw DimensionError("sample_prior: features " + shape_str(z_ar.shape()) + ", entropy " +
                             shape_str(entropy.shape()) + ", noise " + shape_str(eps.shape()));
    }
    Tensor x0 = z_ar;
    x0.zero_grad();
    for (std::size_t r = 0; r < R; ++r) {
        const double s = sigma_saturating(entropy[r], cfg);
        if (s == 0.0) {
            continue;
        }
        for (std::size_t c = 0; c < d; ++c) {
            x0[r * d + c] += s * eps[r * d + c];
        }
    }
    return x0;
}

inline Tensor sample_prior(const Tensor& z_ar, const EntropyMap& emap, const SigmaMapConfig& cfg, Rng& rng) {
    Tensor eps = rng.normal_tensor(z_ar.shape());
    return sample_prior_with(z_ar, emap.values, cfg, eps);
}

}  // namespace driftar
