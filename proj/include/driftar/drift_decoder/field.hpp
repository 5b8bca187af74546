#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "driftar/ar_core/phi.hpp"

namespace driftar {

struct KernelConfig {
    std::vector<double> temperatures{0.02, 0.05, 0.2};
    // Squared distances are divided by this before the kernel; training uses
    // the feature dimension so temperatures act on per-coordinate distances.
    double distance_scale = 1.0;
    bool repulsion = true;  // field ablation: attraction only when false

    void validate() const {
        if (temperatures.empty()) {
            throw ConfigError("kernel temperature list is empty");
        }
        for (double t : temperatures) {
            if (!(t > 0.0)) {
                throw ConfigError("kernel temperatures must be positive");
            }
        }
        if (!(distance_scale > 0.0)) {
            throw ConfigError("kernel distance_scale must be positive");
        }
    }
};

namespace detail {

// Kernel-weighted mean displacement from each query toward `points`, with
// weights normalized per query: sum_y w_tau(x, y) (y - x).
inline void add_mean_shift(const Tensor& queries, const Tensor& points, double tau, double dist_scale, double sign,
                           double weight, Tensor& out) {
    const std::size_t n = queries.rows(), m = points.rows(), k = queries.cols();
    std::vector<double> logits(m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = queries.data().data() + i * k;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
            const double* y = points.data().data() + j * k;
            double sq = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const double u = y[c] - x[c];
                sq += u * u;
            }
            logits[j] = -sq / (tau * dist_scale);
            mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            logits[j] = std::exp(logits[j] - mx);
            z += logits[j];
        }
        double* o = out.data().data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const double w = sign * weight * logits[j] / z;
            const double* y = points.data().data() + j * k;
            for (std::size_t c = 0; c < k; ++c) {
                o[c] += w * (y[c] - x[c]);
            }
        }
    }
}

}  // namespace detail

/// V_{p,q} at the query points: attraction toward p minus attraction toward
/// q, averaged over temperatures. Swapping p and q negates it exactly.
inline Tensor drifting_field_at(const Tensor& queries, const Tensor& p, const Tensor& q, const KernelConfig& kcfg) {
    kcfg.validate();
    if (p.rows() == 0) {
        throw DomainError("drifting field needs at least one attracting sample");
    }
    if (p.cols() != queries.cols() || (kcfg.repulsion && q.cols() != queries.cols())) {
        throw DimensionError("drifting field: queries " + shape_str(queries.shape()) + ", p " + shape_str(p.shape()) +
                             ", q " + shape_str(q.shape()));
    }
    const double w = 1.0 / static_cast<double>(kcfg.temperatures.size());
    Tensor attract(queries.shape());
    Tensor repel(queries.shape());
    for (double tau : kcfg.temperatures) {
        detail::add_mean_shift(queries, p, tau, kcfg.distance_scale, 1.0, w, attract);
        if (kcfg.repulsion && q.rows() > 0) {
            detail::add_mean_shift(queries, q, tau, kcfg.distance_scale, 1.0, w, repel);
        }
    }
    for (std::size_t i = 0; i < attract.numel(); ++i) {
        attract[i] -= repel[i];
    }
    return attract;
}

/// Field at every generated point: attraction by `real`, repulsion by `generated`
/// itself (the self term carries zero displacement).
inline Tensor drifting_field(const Tensor& generated, const Tensor& real, const KernelConfig& kcfg) {
    if (real.rows() == 0) {
        throw DomainError("drifting field needs a non-empty real set");
    }
    return drifting_field_at(generated, real, generated, kcfg);
}

/// Field computed independently inside groups of rows sharing a key (for
/// example class and position); every generated key needs real rows.
inline Tensor grouped_drifting_field(const Tensor& generated, const std::vector<std::size_t>& gen_keys,
                                     const Tensor& real, const std::vector<std::size_t>& real_keys,
                                     const KernelConfig& kcfg) {
    if (gen_keys.size() != generated.rows() || real_keys.size() != real.rows()) {
        throw DimensionError("grouped_drifting_field: key count does not match rows");
    }
    const std::size_t k = generated.cols();
    std::map<std::size_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> groups;
    for (std::size_t i = 0; i < gen_keys.size(); ++i) {
        groups[gen_keys[i]].first.push_back(i);
    }
    for (std::size_t j = 0; j < real_keys.size(); ++j) {
        auto it = groups.find(real_keys[j]);
        if (it != groups.end()) {
            it->second.second.push_back(j);
        }
    }
    auto pick = [k](const Tensor& src, const std::vector<std::size_t>& idx) {
        Tensor t(Shape{idx.size(), k});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::copy_n(src.data().data() + idx[r] * k, k, t.data().data() + r * k);
        }
        return t;
    };
    Tensor out(generated.shape());
    for (const auto& [key, members] : groups) {
        if (members.second.empty()) {
            throw DomainError("drifting field group " + std::to_string(key) + " has no real samples");
        }
        Tensor g = pick(generated, members.first);
        Tensor v = drifting_field(g, pick(real, members.second), kcfg);
        for (std::size_t r = 0; r < members.first.size(); ++r) {
            std::copy_n(v.data().data() + r * k, k, out.data().data() + members.first[r] * k);
        }
    }
    return out;
}

/// Regression target sg(phi(x_hat) + V).
inline Tensor drift_target(const Tensor& phi_gen, const Tensor& field) {
    if (phi_gen.shape() != field.shape()) {
        throw DimensionError("drift_target: features " + shape_str(phi_gen.shape()) + " vs field " +
                             shape_str(field.shape()));
    }
    Tensor t = phi_gen;
    t.zero_grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] += field[i];
    }
    return t;
}

/// mean_rows ||phi(x_hat) - target||^2 with the target held constant.
inline Var drift_loss_to(Var phi_gen, const Tensor& target) {
    Var t = phi_gen.tape->constant(target);
    return ad::mean_row_sqnorm(ad::sub(phi_gen, t));
}

/// Drift loss from live generated features and real features; the field is
/// evaluated on detached values, so the loss equals mean ||V||^2 and its
/// gradient is -2 V / N on the generated features.
inline Var drift_loss(Var phi_gen, const Tensor& phi_real, const KernelConfig& kcfg,
                      const std::vector<std::size_t>& gen_keys, const std::vector<std::size_t>& real_keys,
                      Tensor* field_out = nullptr) {
    Tensor v = grouped_drifting_field(phi_gen.value(), gen_keys, phi_real, real_keys, kcfg);
    Var loss = drift_loss_to(phi_gen, drift_target(phi_gen.value(), v));
    if (field_out) {
        *field_out = std::move(v);
    }
    return loss;
}

// Group key for (class, position) pairs of a batch of R-row grids.
inline std::vector<std::size_t> class_position_keys(const std::vector<int>& class_ids, std::size_t R) {
    std::vector<std::size_t> keys;
    keys.reserve(class_ids.size() * R);
    for (int c : class_ids) {
        for (std::size_t r = 0; r < R; ++r) {
            keys.push_back(static_cast<std::size_t>(c) * R + r);
        }
    }
    return keys;
}

/// Decoder output -> phi -> drift loss against phi of the real grids.
inline Var drift_loss(Tape& tape, Var x_hat, const std::vector<int>& gen_classes, const Tensor& real_grids,
                      const std::vector<int>& real_classes, const PhiEncoder& phi, const KernelConfig& kcfg,
                      std::size_t R) {
    if (!phi.ready()) {
        throw StateError("drift loss needs the phi snapshot");
    }
    Var phi_gen = phi.encode(tape, x_hat, gen_classes);
    Tensor phi_real = phi.encode_batch(real_grids, real_classes);
    return drift_loss(phi_gen, phi_real, kcfg, class_position_keys(gen_classes, R),
                      class_position_keys(real_classes, R));
}

}  // namespace driftar
