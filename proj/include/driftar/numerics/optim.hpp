#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "driftar/numerics/params.hpp"

namespace driftar {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

/// Adam with decoupled weight decay.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }
    std::int64_t steps() const noexcept { return steps_; }

    /// Applies accumulated gradients to every non-frozen tensor, then clears
    /// all gradients. Returns the pre-clip global gradient norm.
    double step(ModelParams& params) {
        double sq = 0.0;
        for (auto& [name, t] : params.tensors()) {
            if (params.is_frozen(name)) {
                if (t.grad()) {
                    for (double g : *t.grad()) {
                        if (g != 0.0) {
                            throw StateError("gradient reached frozen parameter '" + name + "'");
                        }
                    }
                }
                continue;
            }
            if (t.grad()) {
                for (double g : *t.grad()) {
                    sq += g * g;
                }
            }
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) {
            throw NumericError("non-finite gradient norm");
        }
        const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (auto& [name, t] : params.tensors()) {
            if (params.is_frozen(name) || !t.grad()) {
                continue;
            }
            auto& [m, v] = moments_[name];
            if (m.size() != t.numel()) {
                m.assign(t.numel(), 0.0);
                v.assign(t.numel(), 0.0);
            }
            const auto& g = *t.grad();
            for (std::size_t i = 0; i < t.numel(); ++i) {
                const double gi = g[i] * clip;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                t[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * t[i]);
            }
        }
        params.zero_grad();
        return norm;
    }

    // Moments exported as named tensors ("<prefix>m.<name>", "<prefix>v.<name>").
    void export_state(ModelParams& out, const std::string& prefix) const {
        for (const auto& [name, mv] : moments_) {
            out.add(prefix + "m." + name, Tensor(Shape{mv.first.size()}, mv.first));
            out.add(prefix + "v." + name, Tensor(Shape{mv.second.size()}, mv.second));
        }
        out.add(prefix + "steps", Tensor(Shape{1}, std::vector<double>{static_cast<double>(steps_)}));
    }

    void import_state(const ModelParams& in, const std::string& prefix) {
        moments_.clear();
        steps_ = 0;
        const std::string mp = prefix + "m.";
        for (const auto& [key, t] : in.tensors()) {
            if (key.rfind(mp, 0) == 0) {
                const std::string name = key.substr(mp.size());
                const Tensor& v = in.at(prefix + "v." + name);
                moments_[name] = {t.values(), v.values()};
            }
        }
        if (in.contains(prefix + "steps")) {
            steps_ = static_cast<std::int64_t>(in.at(prefix + "steps")[0]);
        }
    }

private:
    AdamWConfig cfg_;
    std::int64_t steps_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace driftar
