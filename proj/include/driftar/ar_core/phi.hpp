#pragma once

#include <optional>

#include "driftar/ar_core/transformer.hpp"

namespace driftar {

/// Frozen feature encoder: a snapshot of the target trunk through its
/// penultimate block, run teacher-forced on a whole grid. Row r of the
/// output is the hidden state at the position holding token r.
class PhiEncoder {
public:
    PhiEncoder() = default;

    static PhiEncoder snapshot(const ModelParams& target, const TransformerConfig& cfg) {
        if (cfg.num_layers < 2) {
            throw ConfigError("phi needs a target with at least two layers");
        }
        PhiEncoder phi;
        phi.cfg_ = cfg;
        phi.params_ = ModelParams{};
        for (const auto& [name, t] : target.tensors()) {
            phi.params_->add(name, t);
        }
        phi.params_->freeze_all();
        return phi;
    }

    bool ready() const noexcept { return params_.has_value(); }
    std::size_t layers() const { return cfg_.num_layers - 1; }
    std::size_t dim() const { return cfg_.model_dim; }
    const TransformerConfig& config() const noexcept { return cfg_; }

    const ModelParams& params() const {
        require();
        return *params_;
    }

    /// grids: [batch*R x token_dim] -> [batch*R x model_dim]. Gradient flows
    /// to `grids` only; the snapshot's tensors are frozen.
    Var encode(Tape& tape, Var grids, const std::vector<int>& class_ids) const {
        require();
        const std::size_t B = class_ids.size();
        auto& p = const_cast<ModelParams&>(*params_);  // frozen: bound as untracked constants
        TrunkTrace tr = run_trunk(tape, p, cfg_, grids, class_ids, layers());
        const std::size_t T = tr.seq_len, R = T - 1;
        std::vector<std::size_t> rows;
        rows.reserve(B * R);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t r = 1; r < T; ++r) {
                rows.push_back(b * T + r);
            }
        }
        return ad::gather_rows(tr.hidden, std::move(rows));
    }

    Tensor encode(const Tensor& grid, int class_id) const {
        Tape tape(false);
        return encode(tape, tape.constant(grid), {class_id}).value();
    }

    // Batched convenience for evaluation sets.
    Tensor encode_batch(const Tensor& grids, const std::vector<int>& class_ids) const {
        Tape tape(false);
        return encode(tape, tape.constant(grids), class_ids).value();
    }

private:
    void require() const {
        if (!params_) {
            throw StateError("phi encoder used before the target snapshot was taken");
        }
    }

    TransformerConfig cfg_;
    std::optional<ModelParams> params_;
};

inline Tensor phi_encode(const PhiEncoder& phi, const Tensor& grid, int class_id) { return phi.encode(grid, class_id); }

}  // namespace driftar
