#pragma once

#include <vector>

#include "driftar/ar_core/generate.hpp"
#include "driftar/ar_core/phi.hpp"
#include "driftar/data/dataset.hpp"
#include "driftar/spec_decode/speculative.hpp"

namespace driftar {

/// A dataset flattened into one [N*R x d] token matrix.
struct Corpus {
    Tensor tokens;
    std::vector<int> class_ids;
    std::size_t h = 0, w = 0, d = 0;

    std::size_t size() const { return class_ids.size(); }
    std::size_t positions() const { return h * w; }

    static Corpus from(const std::vector<LatentGrid>& grids) {
        if (grids.empty()) {
            throw DomainError("corpus needs at least one grid");
        }
        Corpus c;
        c.h = grids.front().height();
        c.w = grids.front().width();
        c.d = grids.front().dim();
        const std::size_t per = c.h * c.w * c.d;
        std::vector<double> flat;
        flat.reserve(per * grids.size());
        for (const auto& g : grids) {
            if (g.tokens.numel() != per) {
                throw DimensionError("corpus: grids of different sizes");
            }
            flat.insert(flat.end(), g.tokens.data().begin(), g.tokens.data().end());
            c.class_ids.push_back(g.class_id);
        }
        c.tokens = Tensor(Shape{grids.size() * c.h * c.w, c.d}, std::move(flat));
        return c;
    }

    // Rows of the selected samples, stacked.
    Tensor gather(const Tensor& per_sample_rows, const std::vector<std::size_t>& idx) const {
        const std::size_t rows = per_sample_rows.rows() / size();
        const std::size_t k = per_sample_rows.cols();
        Tensor out(Shape{idx.size() * rows, k});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(per_sample_rows.data().data() + idx[i] * rows * k, rows * k,
                        out.data().data() + i * rows * k);
        }
        return out;
    }

    Tensor batch_tokens(const std::vector<std::size_t>& idx) const { return gather(tokens, idx); }

    std::vector<int> batch_classes(const std::vector<std::size_t>& idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            out.push_back(class_ids.at(i));
        }
        return out;
    }

    Tensor grid(std::size_t n) const { return gather(tokens, {n}); }
};

inline std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t batch) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) {
        i = static_cast<std::size_t>(rng.below(n));
    }
    return idx;
}

/// Teacher-forced outputs of the fixed target over a corpus.
struct TargetCache {
    Tensor z_ar;            // [N*R x d] next-feature predictions
    Tensor entropy;         // [N*R x 1] penultimate-layer entropy, first position 1.0
    Tensor shallow;         // [N*R x 1] layer-0 entropy, first position 1.0
    Tensor phi_real;        // [N*R x D] phi of the ground-truth grids
};

inline TargetCache build_target_cache(const ModelParams& target, const TransformerConfig& cfg, const PhiEncoder& phi,
                                      const Corpus& corpus, std::size_t chunk = 64) {
    const std::size_t N = corpus.size(), R = corpus.positions(), d = corpus.d, H = cfg.num_heads;
    TargetCache c;
    c.z_ar = Tensor(Shape{N * R, d});
    c.entropy = Tensor(Shape{N * R, 1});
    c.shallow = Tensor(Shape{N * R, 1});
    c.phi_real = Tensor(Shape{N * R, phi.dim()});
    auto& mut = const_cast<ModelParams&>(target);  // grad-free tape never writes through params
    for (std::size_t start = 0; start < N; start += chunk) {
        const std::size_t n = std::min(chunk, N - start);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = start + i;
        }
        Tensor tok = corpus.batch_tokens(idx);
        std::vector<int> cls = corpus.batch_classes(idx);
        Tape tape(false);
        TrunkTrace tr;
        Var pred = predict(tape, mut, cfg, tape.constant(teacher_inputs(tok, n)), cls, &tr);
        Var pen = position_entropy(tr.attention[penultimate_layer(cfg)], n, H, 1.0);
        Var sh = position_entropy(tr.attention[0], n, H, 1.0);
        std::copy_n(pred.value().data().data(), n * R * d, c.z_ar.data().data() + start * R * d);
        std::copy_n(pen.value().data().data(), n * R, c.entropy.data().data() + start * R);
        std::copy_n(sh.value().data().data(), n * R, c.shallow.data().data() + start * R);
        Tensor f = phi.encode_batch(tok, cls);
        std::copy_n(f.data().data(), f.numel(), c.phi_real.data().data() + start * R * phi.dim());
    }
    return c;
}

// Shallow-layer entropies of every position but the first, through compute_tau_global.
inline double tau_global_from(const TargetCache& c, std::size_t R) {
    std::vector<double> e;
    e.reserve(c.shallow.numel());
    for (std::size_t i = 0; i < c.shallow.numel(); ++i) {
        if (i % R != 0) {
            e.push_back(c.shallow[i]);
        }
    }
    return compute_tau_global(e);
}

}  // namespace driftar
