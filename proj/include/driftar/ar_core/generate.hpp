#pragma once

#include <vector>

#include "driftar/ar_core/entropy.hpp"

namespace driftar {

/// Features produced by raster-order generation, with the entropies the
/// generating passes saw at each position.
struct ARGeneration {
    Tensor features;                // [R x token_dim]
    std::vector<double> entropy;    // penultimate-layer entropy per position
    std::vector<double> shallow;    // layer-0 entropy per position
    std::size_t forward_calls = 0;
};

// Entropy of the last row of one layer's attention, 1.0 for a single-support row.
inline double last_row_entropy(const ARForwardResult& res, std::size_t layer, std::size_t row) {
    const Tensor& a = res.attention_maps.at(layer);
    const std::size_t R = a.cols(), H = res.num_heads;
    if (row == 0) {
        return 1.0;
    }
    std::vector<double> avg(row + 1, 0.0);
    const double w = 1.0 / static_cast<double>(H);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t c = 0; c <= row; ++c) {
            avg[c] += w * a[(h * R + row) * R + c];
        }
    }
    return attention_entropy(avg, row + 1);
}

inline std::size_t penultimate_layer(const TransformerConfig& cfg) { return cfg.num_layers >= 2 ? cfg.num_layers - 2 : 0; }

/// One token at a time: feature r is the model's prediction given the class
/// and the r - 1 features generated before it.
inline ARGeneration generate_autoregressive(const ModelParams& params, const TransformerConfig& cfg, int class_id,
                                            std::size_t R) {
    if (R == 0 || R + 1 > cfg.max_positions) {
        throw CapacityError("cannot generate " + std::to_string(R) + " tokens with max_positions " +
                            std::to_string(cfg.max_positions));
    }
    const std::size_t d = cfg.token_dim;
    ARGeneration out;
    out.features = Tensor(Shape{R, d});
    for (std::size_t k = 0; k < R; ++k) {
        Tensor prefix(Shape{k, d}, std::vector<double>(out.features.data().begin(),
                                                       out.features.data().begin() + static_cast<std::ptrdiff_t>(k * d)));
        ARForwardResult res = forward_prefix(params, cfg, prefix, class_id);
        ++out.forward_calls;
        std::copy_n(res.predicted_features.data().data() + k * d, d, out.features.data().data() + k * d);
        out.entropy.push_back(last_row_entropy(res, penultimate_layer(cfg), k));
        out.shallow.push_back(last_row_entropy(res, 0, k));
    }
    return out;
}

}  // namespace driftar
