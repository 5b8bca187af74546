#pragma once

#include <cmath>
#include <span>
#include <string>

#include "driftar/ar_core/transformer.hpp"

namespace driftar {

/// Normalized entropy of a causal attention row with support r >= 2:
///     -sum_c p_c ln p_c / ln r,  0 ln 0 = 0.
inline double attention_entropy(std::span<const double> row, std::size_t r) {
    if (r < 2) {
        throw DomainError("attention_entropy: support " + std::to_string(r) + " < 2");
    }
    if (row.size() < r) {
        throw DimensionError("attention_entropy: row of length " + std::to_string(row.size()) + " for support " +
                             std::to_string(r));
    }
    double sum = 0.0, h = 0.0;
    for (std::size_t c = 0; c < r; ++c) {
        const double p = row[c];
        if (p < 0.0) {
            throw DomainError("attention_entropy: negative probability " + std::to_string(p));
        }
        sum += p;
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw DomainError("attention_entropy: row sums to " + std::to_string(sum));
    }
    return h / std::log(static_cast<double>(r));
}

/// Per-position normalized entropy on an h x w grid (raster order).
struct EntropyMap {
    Tensor values;  // [h x w], entries in [0, 1]
    std::size_t source_layer = 0;

    std::size_t positions() const { return values.numel(); }
    double at(std::size_t r) const { return values[r]; }
};

// Head-averaged attention of one sequence: [heads*R x R] -> [R x R].
inline Tensor head_average(const Tensor& attn, std::size_t heads) {
    const std::size_t R = attn.cols();
    if (heads == 0 || attn.rows() != heads * R) {
        throw DimensionError("head_average: " + shape_str(attn.shape()) + " is not " + std::to_string(heads) +
                             " square maps");
    }
    Tensor out(Shape{R, R});
    const double w = 1.0 / static_cast<double>(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < R * R; ++i) {
            out[i] += w * attn[h * R * R + i];
        }
    }
    return out;
}

/// Entropy of each position from one layer's head-averaged attention; the
/// first position (single support) is assigned 1.0.
inline std::vector<double> position_entropies(const ARForwardResult& result, std::size_t layer) {
    if (layer >= result.attention_maps.size()) {
        throw DomainError("entropy layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(result.attention_maps.size()) + ")");
    }
    const Tensor avg = head_average(result.attention_maps[layer], result.num_heads);
    const std::size_t R = avg.rows();
    std::vector<double> out(R, 1.0);
    for (std::size_t r = 1; r < R; ++r) {
        out[r] = attention_entropy(avg.row(r), r + 1);
    }
    return out;
}

inline EntropyMap entropy_map(const ARForwardResult& result, std::size_t layer, std::size_t h, std::size_t w) {
    if (layer >= result.attention_maps.size()) {
        throw DomainError("entropy layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(result.attention_maps.size()) + ")");
    }
    if (h * w != result.attention_maps[layer].cols()) {
        throw DimensionError("entropy_map: " + std::to_string(h) + "x" + std::to_string(w) + " grid for " +
                             std::to_string(result.attention_maps[layer].cols()) + " positions");
    }
    std::vector<double> e = position_entropies(result, layer);
    return EntropyMap{Tensor(Shape{h, w}, std::move(e)), layer};
}

/// -(1/R) * sum_{r>=2} E_r over one result's layer.
inline double entropy_loss(const ARForwardResult& result, std::size_t layer) {
    const std::size_t R = result.positions();
    if (R < 2) {
        throw DomainError("entropy_loss needs R >= 2, got " + std::to_string(R));
    }
    std::vector<double> e = position_entropies(result, layer);
    double s = 0.0;
    for (std::size_t r = 1; r < R; ++r) {
        s += e[r];
    }
    return -s / static_cast<double>(R);
}

// Tape form: attention [batch*heads*R x R] -> per-position entropies [batch*R x 1].
inline Var position_entropy(Var attention, std::size_t batch, std::size_t heads, double first_fill) {
    return ad::causal_row_entropy(ad::head_mean(attention, batch, heads), first_fill);
}

/// Tape form of the entropy loss, averaged over the batch.
inline Var entropy_loss(Var attention, std::size_t batch, std::size_t heads) {
    const std::size_t R = attention.cols();
    if (R < 2) {
        throw DomainError("entropy_loss needs R >= 2, got " + std::to_string(R));
    }
    Var e = position_entropy(attention, batch, heads, 0.0);
    return ad::scale(ad::sum(e), -1.0 / static_cast<double>(batch * R));
}

/// Mean Smooth-L1 (beta = 1) between draft predictions and target features.
inline Var regression_loss(Var draft_pred, Var target_feat) { return ad::smooth_l1_mean(draft_pred, target_feat, 1.0); }

inline double regression_loss(const Tensor& draft_pred, const Tensor& target_feat) {
    Tape tape(false);
    return regression_loss(tape.constant(draft_pred), tape.constant(target_feat)).value().item();
}

}  // namespace driftar
