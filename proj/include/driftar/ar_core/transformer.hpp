#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "driftar/numerics/params.hpp"

// Causal transformer over continuous token sequences.
//
// A sequence of length T is [class embedding, x_1, ..., x_{T-1}]; output row
// p is the prediction of token p+1, so row p only ever sees the class and
// tokens 1..p. Blocks are pre-LN: h += attn(LN(h)); h += mlp(LN(h)).

namespace driftar {

struct TransformerConfig {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t model_dim = 64;
    std::size_t token_dim = 8;
    std::size_t max_positions = 65;
    std::size_t draft_layers = 2;
    std::size_t num_classes = 4;
    std::size_t mlp_ratio = 2;

    void validate() const {
        if (num_layers == 0 || num_heads == 0 || model_dim == 0 || token_dim == 0 || max_positions == 0 ||
            num_classes == 0 || mlp_ratio == 0) {
            throw ConfigError("transformer sizes must be positive");
        }
        if (model_dim % num_heads != 0) {
            throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                              std::to_string(num_heads));
        }
        if (draft_layers == 0 || draft_layers >= num_layers) {
            throw ConfigError("draft_layers must be in [1, num_layers)");
        }
    }

    // Same widths with the draft's depth.
    TransformerConfig draft() const {
        TransformerConfig d = *this;
        d.num_layers = draft_layers;
        d.draft_layers = 0;
        return d;
    }

    std::size_t head_dim() const { return model_dim / num_heads; }
};

inline std::string block_name(std::size_t layer, const char* leaf) {
    return "block" + std::to_string(layer) + "." + leaf;
}

inline ModelParams init_transformer(const TransformerConfig& cfg, Rng& rng) {
    const std::size_t D = cfg.model_dim, d = cfg.token_dim, M = cfg.model_dim * cfg.mlp_ratio;
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.num_layers));
    ModelParams p;
    p.add("embed.in.w", init_linear(rng, d, D));
    p.add("embed.in.b", Tensor(Shape{1, D}));
    p.add("embed.class", init_normal(rng, Shape{cfg.num_classes, D}, 0.5));
    p.add("embed.pos", init_normal(rng, Shape{cfg.max_positions, D}, 0.1));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        p.add(block_name(l, "wq"), init_linear(rng, D, D));
        p.add(block_name(l, "wk"), init_linear(rng, D, D));
        p.add(block_name(l, "wv"), init_linear(rng, D, D));
        p.add(block_name(l, "wo"), init_linear(rng, D, D, residual_gain));
        p.add(block_name(l, "mlp.w1"), init_linear(rng, D, M));
        p.add(block_name(l, "mlp.b1"), Tensor(Shape{1, M}));
        p.add(block_name(l, "mlp.w2"), init_linear(rng, M, D, residual_gain));
        p.add(block_name(l, "mlp.b2"), Tensor(Shape{1, D}));
    }
    p.add("head.w", init_linear(rng, D, d));
    p.add("head.b", Tensor(Shape{1, d}));
    return p;
}

/// Tape-level trunk activations for a batch of equal-length sequences.
struct TrunkTrace {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    Var hidden;                   // [batch*seq_len x D] after the last block run
    std::vector<Var> attention;   // per layer, [batch*heads*seq_len x seq_len]
    std::vector<Var> layer_out;   // per layer, [batch*seq_len x D]
};

inline void check_class_ids(const TransformerConfig& cfg, const std::vector<int>& class_ids) {
    for (int c : class_ids) {
        if (c < 0 || static_cast<std::size_t>(c) >= cfg.num_classes) {
            throw DomainError("class id " + std::to_string(c) + " outside [0, " + std::to_string(cfg.num_classes) +
                              ")");
        }
    }
}

/// Runs embedding plus the first `layers` blocks.
///
/// `body` holds, for each of the class_ids.size() sequences, its seq_len - 1
/// input tokens stacked as [batch*(seq_len-1) x token_dim].
inline TrunkTrace run_trunk(Tape& tape, ModelParams& params, const TransformerConfig& cfg, Var body,
                            const std::vector<int>& class_ids, std::size_t layers) {
    const std::size_t B = class_ids.size();
    if (B == 0) {
        throw DimensionError("run_trunk: empty batch");
    }
    if ((body.rows() > 0 && body.cols() != cfg.token_dim) || body.rows() % B != 0) {
        throw DimensionError("run_trunk: token block " + shape_str(body.value().shape()) + " for batch " +
                             std::to_string(B) + " of token_dim " + std::to_string(cfg.token_dim));
    }
    if (layers > cfg.num_layers) {
        throw DomainError("run_trunk: " + std::to_string(layers) + " layers requested of " +
                          std::to_string(cfg.num_layers));
    }
    check_class_ids(cfg, class_ids);
    const std::size_t len = body.rows() / B;
    const std::size_t T = len + 1;
    if (T > cfg.max_positions) {
        throw CapacityError("sequence of " + std::to_string(T) + " positions exceeds max_positions " +
                            std::to_string(cfg.max_positions));
    }
    const std::size_t H = cfg.num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

    std::vector<std::size_t> cls(class_ids.begin(), class_ids.end());
    Var cls_rows = ad::gather_rows(param(tape, params, "embed.class"), cls);
    Var x = cls_rows;
    if (len > 0) {
        Var tok = ad::add_row(ad::matmul(body, param(tape, params, "embed.in.w")), param(tape, params, "embed.in.b"));
        x = ad::prepend_rows(cls_rows, tok, len);
    }
    std::vector<std::size_t> pos_idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        pos_idx[i] = i;
    }
    x = ad::add_tiled(x, ad::gather_rows(param(tape, params, "embed.pos"), pos_idx));

    TrunkTrace trace;
    trace.batch = B;
    trace.seq_len = T;
    for (std::size_t l = 0; l < layers; ++l) {
        Var n1 = ad::layer_norm(x);
        Var q = ad::matmul(n1, param(tape, params, block_name(l, "wq")));
        Var k = ad::matmul(n1, param(tape, params, block_name(l, "wk")));
        Var v = ad::matmul(n1, param(tape, params, block_name(l, "wv")));
        Var p = ad::softmax_rows(ad::attn_scores(q, k, B, H, scale, true), true);
        Var a = ad::matmul(ad::attn_apply(p, v, B, H, true), param(tape, params, block_name(l, "wo")));
        x = ad::add(x, a);
        Var n2 = ad::layer_norm(x);
        Var m = ad::gelu(
            ad::add_row(ad::matmul(n2, param(tape, params, block_name(l, "mlp.w1"))), param(tape, params, block_name(l, "mlp.b1"))));
        m = ad::add_row(ad::matmul(m, param(tape, params, block_name(l, "mlp.w2"))), param(tape, params, block_name(l, "mlp.b2")));
        x = ad::add(x, m);
        trace.attention.push_back(p);
        trace.layer_out.push_back(x);
    }
    trace.hidden = x;
    return trace;
}

inline Var output_head(Tape& tape, ModelParams& params, Var hidden) {
    return ad::add_row(ad::matmul(ad::layer_norm(hidden), param(tape, params, "head.w")), param(tape, params, "head.b"));
}

/// Full forward on a tape; returns predictions [batch*seq_len x token_dim].
inline Var predict(Tape& tape, ModelParams& params, const TransformerConfig& cfg, Var body,
                   const std::vector<int>& class_ids, TrunkTrace* trace_out = nullptr) {
    TrunkTrace trace = run_trunk(tape, params, cfg, body, class_ids, cfg.num_layers);
    Var out = output_head(tape, params, trace.hidden);
    if (trace_out != nullptr) {
        *trace_out = std::move(trace);
    }
    return out;
}

// Teacher-forcing input: drop the last token of each R-token sequence.
inline Tensor teacher_inputs(const Tensor& tokens, std::size_t batch) {
    const std::size_t R = tokens.rows() / batch, d = tokens.cols();
    if (R == 0 || tokens.rows() != batch * R) {
        throw DimensionError("teacher_inputs: " + shape_str(tokens.shape()) + " is not " + std::to_string(batch) +
                             " sequences");
    }
    Tensor out(Shape{batch * (R - 1), d});
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(tokens.data().data() + b * R * d, (R - 1) * d, out.data().data() + b * (R - 1) * d);
    }
    return out;
}

/// Plain-value result of one sequence's forward pass.
struct ARForwardResult {
    Tensor predicted_features;          // [R x token_dim]
    std::vector<Tensor> attention_maps;  // per layer, [heads*R x R]
    std::vector<Tensor> hidden_states;  // per layer, [R x model_dim]
    std::size_t num_heads = 0;

    std::size_t positions() const { return predicted_features.rows(); }
};

/// Evaluates [class, prefix] without gradients; R = prefix rows + 1 outputs,
/// the last of which predicts the token after the prefix.
inline ARForwardResult forward_prefix(const ModelParams& params, const TransformerConfig& cfg, const Tensor& prefix,
                                      int class_id) {
    if (prefix.rank() != 2 || (prefix.numel() > 0 && prefix.cols() != cfg.token_dim)) {
        throw DimensionError("forward_prefix: prefix " + shape_str(prefix.shape()) + " for token_dim " +
                             std::to_string(cfg.token_dim));
    }
    Tape tape(false);
    auto& mut = const_cast<ModelParams&>(params);  // grad-free tape never writes through params
    Tensor body = prefix.numel() == 0 ? Tensor(Shape{0, cfg.token_dim}) : prefix;
    TrunkTrace trace;
    Var pred = predict(tape, mut, cfg, tape.constant(std::move(body)), {class_id}, &trace);
    ARForwardResult out;
    out.predicted_features = pred.value();
    out.num_heads = cfg.num_heads;
    for (std::size_t l = 0; l < trace.attention.size(); ++l) {
        out.attention_maps.push_back(trace.attention[l].value());
        out.hidden_states.push_back(trace.layer_out[l].value());
    }
    return out;
}

/// Teacher-forced forward over R tokens: prediction r uses the class and
/// tokens before r.
inline ARForwardResult forward(const ModelParams& params, const TransformerConfig& cfg, const Tensor& tokens,
                               int class_id) {
    if (tokens.rank() != 2 || tokens.cols() != cfg.token_dim || tokens.rows() == 0) {
        throw DimensionError("forward: tokens " + shape_str(tokens.shape()) + " for token_dim " +
                             std::to_string(cfg.token_dim));
    }
    if (tokens.rows() > cfg.max_positions - 1) {
        throw CapacityError(std::to_string(tokens.rows()) + " tokens exceed max_positions - 1 = " +
                            std::to_string(cfg.max_positions - 1));
    }
    return forward_prefix(params, cfg, teacher_inputs(tokens, 1), class_id);
}

/// Draft initialisation: embeddings, the first draft_layers blocks and the
/// output head copied from the target.
inline ModelParams init_draft_from_target(const ModelParams& target, const TransformerConfig& cfg) {
    cfg.validate();
    ModelParams draft;
    for (const auto& [name, t] : target.tensors()) {
        if (name.rfind("block", 0) == 0) {
            const std::size_t layer = std::stoul(name.substr(5, name.find('.') - 5));
            if (layer >= cfg.draft_layers) {
                continue;
            }
        }
        draft.add(name, t);
    }
    const std::size_t D = cfg.model_dim;
    const Tensor& w = draft.at("head.w");
    if (w.rows() != D || w.cols() != cfg.token_dim || draft.at("embed.in.w").rows() != cfg.token_dim) {
        throw DimensionError("init_draft_from_target: target head " + shape_str(w.shape()) + " does not match config");
    }
    for (std::size_t l = 0; l < cfg.draft_layers; ++l) {
        if (!draft.contains(block_name(l, "wq"))) {
            throw DimensionError("init_draft_from_target: target has no block " + std::to_string(l));
        }
    }
    return draft;
}

}  // namespace driftar
