#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "driftar/numerics/params.hpp"

// Single-pass decoder x_hat = x0 + f(x0, class, E).
//
// Every normalization is an Entropy-AdaLN: LN(h) * (1 + scale) + shift, where
// (shift, scale) are a per-position linear read-out of
//     silu(class_embedding + entropy_mlp(E_r)).
// Attention is bidirectional over the R positions. There is no timestep
// input anywhere.

namespace driftar {

struct DecoderConfig {
    std::size_t num_blocks = 4;
    std::size_t num_heads = 4;
    std::size_t model_dim = 64;
    std::size_t token_dim = 8;
    std::size_t positions = 64;
    std::size_t num_classes = 4;
    std::size_t mlp_ratio = 2;

    void validate() const {
        if (num_blocks == 0 || num_heads == 0 || model_dim == 0 || token_dim == 0 || positions == 0 ||
            num_classes == 0 || mlp_ratio == 0) {
            throw ConfigError("decoder sizes must be positive");
        }
        if (model_dim % num_heads != 0) {
            throw ConfigError("decoder model_dim not divisible by num_heads");
        }
    }
};

inline std::string dec_name(std::size_t block, const char* leaf) {
    return "dec" + std::to_string(block) + "." + leaf;
}

// AdaLN blocks plus the modulated zero-initialised read-out to token_dim.
inline void init_adaln_stack(ModelParams& p, const DecoderConfig& cfg, Rng& rng) {
    const std::size_t D = cfg.model_dim, d = cfg.token_dim, M = cfg.model_dim * cfg.mlp_ratio;
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.num_blocks));
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        p.add(dec_name(b, "mod.w"), init_linear(rng, D, 4 * D, 0.1));
        p.add(dec_name(b, "mod.b"), Tensor(Shape{1, 4 * D}));
        p.add(dec_name(b, "wq"), init_linear(rng, D, D));
        p.add(dec_name(b, "wk"), init_linear(rng, D, D));
        p.add(dec_name(b, "wv"), init_linear(rng, D, D));
        p.add(dec_name(b, "wo"), init_linear(rng, D, D, residual_gain));
        p.add(dec_name(b, "mlp.w1"), init_linear(rng, D, M));
        p.add(dec_name(b, "mlp.b1"), Tensor(Shape{1, M}));
        p.add(dec_name(b, "mlp.w2"), init_linear(rng, M, D, residual_gain));
        p.add(dec_name(b, "mlp.b2"), Tensor(Shape{1, D}));
    }
    p.add("out.mod.w", init_linear(rng, D, 2 * D, 0.1));
    p.add("out.mod.b", Tensor(Shape{1, 2 * D}));
    // Zero read-out: an untrained stack outputs exactly zero.
    p.add("out.w", Tensor(Shape{D, d}));
    p.add("out.b", Tensor(Shape{1, d}));
}

inline ModelParams init_decoder(const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t D = cfg.model_dim, d = cfg.token_dim;
    ModelParams p;
    p.add("in.w", init_linear(rng, d, D));
    p.add("in.b", Tensor(Shape{1, D}));
    p.add("pos", init_normal(rng, Shape{cfg.positions, D}, 0.1));
    p.add("cond.class", init_normal(rng, Shape{cfg.num_classes, D}, 0.5));
    p.add("cond.ent.w1", init_normal(rng, Shape{1, D}, 1.0));
    p.add("cond.ent.b1", Tensor(Shape{1, D}));
    p.add("cond.ent.w2", init_linear(rng, D, D));
    p.add("cond.ent.b2", Tensor(Shape{1, D}));
    init_adaln_stack(p, cfg, rng);
    return p;
}

namespace detail {

// LN(h) * (1 + scale) + shift with per-row modulation.
inline Var modulated_norm(Var h, Var shift, Var scale) {
    Var n = ad::layer_norm(h);
    return ad::add(ad::add(n, ad::mul(n, scale)), shift);
}

}  // namespace detail

/// Blocks of (AdaLN -> bidirectional attention -> AdaLN -> MLP) driven by
/// `cond` [batch*R x D], then a modulated read-out to token_dim.
inline Var adaln_stack(Tape& tape, ModelParams& params, const DecoderConfig& cfg, Var h, Var cond, std::size_t B) {
    const std::size_t D = cfg.model_dim, H = cfg.num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(D / H));
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        Var mod = ad::add_row(ad::matmul(cond, param(tape, params, dec_name(b, "mod.w"))), param(tape, params, dec_name(b, "mod.b")));
        Var n1 = detail::modulated_norm(h, ad::slice_cols(mod, 0, D), ad::slice_cols(mod, D, D));
        Var q = ad::matmul(n1, param(tape, params, dec_name(b, "wq")));
        Var k = ad::matmul(n1, param(tape, params, dec_name(b, "wk")));
        Var v = ad::matmul(n1, param(tape, params, dec_name(b, "wv")));
        Var p = ad::softmax_rows(ad::attn_scores(q, k, B, H, scale, false), false);
        h = ad::add(h, ad::matmul(ad::attn_apply(p, v, B, H, false), param(tape, params, dec_name(b, "wo"))));
        Var n2 = detail::modulated_norm(h, ad::slice_cols(mod, 2 * D, D), ad::slice_cols(mod, 3 * D, D));
        Var m = ad::gelu(ad::add_row(ad::matmul(n2, param(tape, params, dec_name(b, "mlp.w1"))), param(tape, params, dec_name(b, "mlp.b1"))));
        m = ad::add_row(ad::matmul(m, param(tape, params, dec_name(b, "mlp.w2"))), param(tape, params, dec_name(b, "mlp.b2")));
        h = ad::add(h, m);
    }
    Var mod = ad::add_row(ad::matmul(cond, param(tape, params, "out.mod.w")), param(tape, params, "out.mod.b"));
    Var n = detail::modulated_norm(h, ad::slice_cols(mod, 0, D), ad::slice_cols(mod, D, D));
    return ad::add_row(ad::matmul(n, param(tape, params, "out.w")), param(tape, params, "out.b"));
}

/// x0: [batch*R x token_dim]; entropy: batch*R values. Returns x_hat, same shape as x0.
inline Var decoder_forward(Tape& tape, ModelParams& params, const DecoderConfig& cfg, Var x0,
                           const std::vector<int>& class_ids, const Tensor& entropy) {
    const std::size_t B = class_ids.size();
    const std::size_t R = cfg.positions;
    if (B == 0 || x0.rows() != B * R || x0.cols() != cfg.token_dim) {
        throw DimensionError("decoder_forward: input " + shape_str(x0.value().shape()) + " for " + std::to_string(B) +
                             " grids of " + std::to_string(R) + "x" + std::to_string(cfg.token_dim));
    }
    if (entropy.numel() != B * R) {
        throw DimensionError("decoder_forward: entropy " + shape_str(entropy.shape()) + " for " +
                             std::to_string(B * R) + " positions");
    }
    for (int c : class_ids) {
        if (c < 0 || static_cast<std::size_t>(c) >= cfg.num_classes) {
            throw DomainError("decoder class id " + std::to_string(c) + " out of range");
        }
    }
    std::vector<std::size_t> cls_rows;
    cls_rows.reserve(B * R);
    for (int c : class_ids) {
        cls_rows.insert(cls_rows.end(), R, static_cast<std::size_t>(c));
    }
    Var ent_col = tape.constant(entropy.reshaped(Shape{B * R, 1}));
    Var e = ad::silu(ad::add_row(ad::matmul(ent_col, param(tape, params, "cond.ent.w1")), param(tape, params, "cond.ent.b1")));
    e = ad::add_row(ad::matmul(e, param(tape, params, "cond.ent.w2")), param(tape, params, "cond.ent.b2"));
    Var cond = ad::silu(ad::add(ad::gather_rows(param(tape, params, "cond.class"), std::move(cls_rows)), e));

    Var h = ad::add_row(ad::matmul(x0, param(tape, params, "in.w")), param(tape, params, "in.b"));
    h = ad::add_tiled(h, param(tape, params, "pos"));
    Var delta = adaln_stack(tape, params, cfg, h, cond, B);
    return ad::add(x0, delta);
}

/// Plain-value single grid decode: x0 [R x d], entropy [R] (any shape with R entries).
inline Tensor decoder_forward(const ModelParams& params, const DecoderConfig& cfg, const Tensor& x0, int class_id,
                              const Tensor& entropy) {
    Tape tape(false);
    auto& mut = const_cast<ModelParams&>(params);  // grad-free tape never writes through params
    return decoder_forward(tape, mut, cfg, tape.constant(x0), {class_id}, entropy).value();
}

}  // namespace driftar
