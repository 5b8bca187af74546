#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "driftar/numerics/autodiff.hpp"
#include "driftar/numerics/rng.hpp"

namespace driftar {

/// Named tensor collection with freeze flags.
///
/// Frozen tensors are never bound as tracked leaves, so no gradient can reach
/// them; optimizers additionally refuse to touch them.
class ModelParams {
public:
    Tensor& add(const std::string& name, Tensor value) {
        value.set_requires_grad(!frozen_.contains(name));
        auto [it, inserted] = tensors_.insert_or_assign(name, std::move(value));
        return it->second;
    }

    bool contains(const std::string& name) const { return tensors_.contains(name); }

    Tensor& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw StateError("missing parameter '" + name + "'");
        }
        return it->second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw StateError("missing parameter '" + name + "'");
        }
        return it->second;
    }

    void freeze(const std::string& name) {
        at(name).set_requires_grad(false);
        at(name).zero_grad();
        frozen_.insert(name);
    }

    void unfreeze(const std::string& name) {
        at(name).set_requires_grad(true);
        frozen_.erase(name);
    }

    void freeze_all() {
        for (auto& [name, t] : tensors_) {
            freeze(name);
        }
    }

    void unfreeze_all() {
        for (auto& [name, t] : tensors_) {
            unfreeze(name);
        }
    }

    bool is_frozen(const std::string& name) const { return frozen_.contains(name); }
    const std::set<std::string>& frozen() const noexcept { return frozen_; }

    std::map<std::string, Tensor>& tensors() noexcept { return tensors_; }
    const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors_.size());
        for (const auto& [name, t] : tensors_) {
            out.push_back(name);
        }
        return out;
    }

    std::size_t size() const noexcept { return tensors_.size(); }

    std::size_t num_values() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors_) {
            n += t.numel();
        }
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : tensors_) {
            t.zero_grad();
        }
    }

    // Values-only equality (freeze flags and gradients ignored).
    bool same_values(const ModelParams& other) const {
        if (tensors_.size() != other.tensors_.size()) {
            return false;
        }
        for (const auto& [name, t] : tensors_) {
            auto it = other.tensors_.find(name);
            if (it == other.tensors_.end() || !t.bit_equal(it->second)) {
                return false;
            }
        }
        return true;
    }

private:
    std::map<std::string, Tensor> tensors_;
    std::set<std::string> frozen_;
};

inline Var param(Tape& tape, ModelParams& params, const std::string& name) { return tape.param(params.at(name)); }

inline Tensor init_normal(Rng& rng, Shape shape, double stddev) { return rng.normal_tensor(std::move(shape), stddev); }

// Fan-in scaled Gaussian init for a [fan_in x fan_out] weight.
inline Tensor init_linear(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
    return rng.normal_tensor(Shape{fan_in, fan_out}, gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace driftar
