#pragma once

#include <map>
#include <string>
#include <vector>

#include "driftar/data/format.hpp"
#include "driftar/numerics/params.hpp"

// Checkpoints reuse the DAR1 container. Parameters keep their names;
// metadata lives under "meta." (scalars), "meta.rng." (generator states, u64
// words split into exact 32-bit halves) and "meta.frozen." (freeze flags).

namespace driftar {

struct CheckpointMeta {
    std::map<std::string, double> scalars;
    std::map<std::string, RngState> rngs;

    double scalar(const std::string& key) const {
        auto it = scalars.find(key);
        if (it == scalars.end()) {
            throw FormatError("checkpoint metadata has no '" + key + "'");
        }
        return it->second;
    }

    const RngState& rng(const std::string& key) const {
        auto it = rngs.find(key);
        if (it == rngs.end()) {
            throw FormatError("checkpoint metadata has no generator state '" + key + "'");
        }
        return it->second;
    }

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

namespace detail {

inline Tensor encode_rng(const RngState& s) {
    std::vector<double> v;
    for (std::uint64_t w : s.words) {
        v.push_back(static_cast<double>(w >> 32));
        v.push_back(static_cast<double>(w & 0xffffffffULL));
    }
    v.push_back(s.has_spare ? 1.0 : 0.0);
    v.push_back(s.spare);
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

inline RngState decode_rng(const Tensor& t, const std::string& name) {
    if (t.numel() != 10) {
        throw FormatError("generator state '" + name + "' has " + std::to_string(t.numel()) + " values, expected 10");
    }
    RngState s;
    for (std::size_t i = 0; i < 4; ++i) {
        s.words[i] = (static_cast<std::uint64_t>(t[2 * i]) << 32) | static_cast<std::uint64_t>(t[2 * i + 1]);
    }
    s.has_spare = t[8] != 0.0;
    s.spare = t[9];
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params, const CheckpointMeta& meta) {
    std::vector<format::NamedTensor> entries;
    for (const auto& [name, t] : params.tensors()) {
        Tensor copy = t;
        copy.zero_grad();
        entries.emplace_back(name, std::move(copy));
    }
    for (const auto& name : params.frozen()) {
        entries.emplace_back("meta.frozen." + name, Tensor(Shape{1}, std::vector<double>{1.0}));
    }
    for (const auto& [key, v] : meta.scalars) {
        entries.emplace_back("meta." + key, Tensor(Shape{1}, std::vector<double>{v}));
    }
    for (const auto& [key, s] : meta.rngs) {
        entries.emplace_back("meta.rng." + key, detail::encode_rng(s));
    }
    format::write_file(path, entries);
}

struct Checkpoint {
    ModelParams params;
    CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::string& path, const std::vector<std::string>& required = {}) {
    Checkpoint ck;
    std::vector<std::string> frozen;
    for (auto& [name, t] : format::read_file(path)) {
        if (name.rfind("meta.frozen.", 0) == 0) {
            frozen.push_back(name.substr(12));
        } else if (name.rfind("meta.rng.", 0) == 0) {
            ck.meta.rngs[name.substr(9)] = detail::decode_rng(t, name);
        } else if (name.rfind("meta.", 0) == 0) {
            if (t.numel() != 1) {
                throw FormatError(path + ": metadata '" + name + "' is not a scalar");
            }
            ck.meta.scalars[name.substr(5)] = t[0];
        } else {
            ck.params.add(name, std::move(t));
        }
    }
    for (const auto& name : frozen) {
        if (!ck.params.contains(name)) {
            throw FormatError(path + ": frozen flag for absent tensor '" + name + "'");
        }
        ck.params.freeze(name);
    }
    std::string missing;
    for (const auto& name : required) {
        if (!ck.params.contains(name)) {
            missing += (missing.empty() ? "" : ", ") + name;
        }
    }
    if (!missing.empty()) {
        throw FormatError(path + ": missing tensors: " + missing);
    }
    return ck;
}

/// Copies `src` into `dst` with every name prefixed; freeze flags carry over.
inline void merge_prefixed(ModelParams& dst, const std::string& prefix, const ModelParams& src) {
    for (const auto& [name, t] : src.tensors()) {
        dst.add(prefix + name, t);
        if (src.is_frozen(name)) {
            dst.freeze(prefix + name);
        }
    }
}

/// Inverse of merge_prefixed; throws FormatError if nothing carries the prefix.
inline ModelParams extract_prefixed(const ModelParams& src, const std::string& prefix) {
    ModelParams out;
    for (const auto& [name, t] : src.tensors()) {
        if (name.rfind(prefix, 0) == 0) {
            out.add(name.substr(prefix.size()), t);
            if (src.is_frozen(name)) {
                out.freeze(name.substr(prefix.size()));
            }
        }
    }
    if (out.size() == 0) {
        throw FormatError("checkpoint has no tensors under '" + prefix + "'");
    }
    return out;
}

}  // namespace driftar
