#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "driftar/baseline_diffusion/diffusion.hpp"
#include "driftar/spec_decode/speculative.hpp"
#include "driftar/training/pretrain.hpp"
#include "driftar/training/trainer.hpp"

// Flat "section.key = value" configuration covering every module.

namespace driftar {

struct DiffusionTrainConfig {
    std::size_t steps = 1000;
    std::size_t batch = 16;
    std::size_t schedule_steps = 100;
    AdamWConfig optimizer{.lr = 1e-3, .weight_decay = 0.0};
};

struct EvalConfig {
    std::size_t samples = 128;        // generated grids per MMD estimate
    std::size_t reference = 128;      // held-out real grids
    std::size_t analysis_grids = 128;
    std::size_t bench_episodes = 10;
    std::vector<std::size_t> sweep_steps{1, 2, 5, 10, 20};
    std::vector<double> sweep_sigmas{0.1, 0.3, 0.5, 0.7, 1.0};
    std::size_t diffusion_steps = 20;  // baseline decoder steps for bench
};

struct RunConfig {
    DatasetSpec dataset;
    TransformerConfig model;
    DecoderConfig decoder;
    PretrainConfig pretrain;
    TrainConfig train;
    DiffusionTrainConfig diffusion;
    SpecConfig spec;
    double gamma = 0.8;
    EvalConfig eval;
    std::uint64_t seed = 1;
    std::string out_dir = "run";
    std::string data_path;  // empty: <out_dir>/dataset.dar

    RunConfig() { sync_derived(); }

    // Grid geometry and class count follow the dataset.
    void sync_derived() {
        model.token_dim = decoder.token_dim = dataset.d;
        model.max_positions = dataset.positions() + 1;
        decoder.positions = dataset.positions();
        model.num_classes = decoder.num_classes = dataset.num_classes;
    }

    std::string dataset_file() const { return data_path.empty() ? out_dir + "/dataset.dar" : data_path; }
    std::string target_file() const { return out_dir + "/target.dar"; }
    std::string train_file() const { return out_dir + "/drift_ar.dar"; }
    std::string diffusion_file() const { return out_dir + "/diffusion.dar"; }

    void validate() const {
        dataset.validate();
        model.validate();
        decoder.validate();
        train.validate();
        if (!(spec.delta_accept >= 0.0) || spec.max_draft == 0) {
            throw ConfigError("spec.delta_accept must be >= 0 and spec.max_draft >= 1");
        }
        if (eval.sweep_steps.empty() || eval.sweep_sigmas.empty()) {
            throw ConfigError("sweep lists must not be empty");
        }
    }
};

namespace detail {

template <class T>
std::string fmt_value(const T& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string fmt_value(bool v) { return v ? "true" : "false"; }

template <class T>
std::string fmt_value(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + fmt_value(v[i]);
    }
    return s;
}

template <class T>
T parse_scalar(const std::string& key, const std::string& text) {
    std::istringstream is(text);
    T v{};
    is >> v;
    if (is.fail() || !(is >> std::ws).eof()) {
        throw ConfigError("bad value for " + key + ": '" + text + "'");
    }
    return v;
}

template <>
inline bool parse_scalar<bool>(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("bad value for " + key + ": '" + text + "' (expected true/false)");
}

template <>
inline std::string parse_scalar<std::string>(const std::string&, const std::string& text) {
    return text;
}

template <class T>
void parse_into(const std::string& key, const std::string& text, T& out) {
    out = parse_scalar<T>(key, text);
}

template <class T>
void parse_into(const std::string& key, const std::string& text, std::vector<T>& out) {
    out.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_scalar<T>(key, item));
    }
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Name -> (read, write) bindings over one RunConfig.
class ConfigBinding {
public:
    explicit ConfigBinding(RunConfig& c) {
        bind("seed", c.seed);
        bind("out_dir", c.out_dir);
        bind("data_path", c.data_path);

        bind("dataset.h", c.dataset.h);
        bind("dataset.w", c.dataset.w);
        bind("dataset.d", c.dataset.d);
        bind("dataset.num_classes", c.dataset.num_classes);
        bind("dataset.num_samples", c.dataset.num_samples);
        bind("dataset.smooth_fraction", c.dataset.smooth_fraction);
        bind("dataset.smooth_sigma", c.dataset.smooth_sigma);
        bind("dataset.textured_sigma", c.dataset.textured_sigma);
        bind("dataset.seed", c.dataset.seed);

        bind("model.num_layers", c.model.num_layers);
        bind("model.num_heads", c.model.num_heads);
        bind("model.model_dim", c.model.model_dim);
        bind("model.draft_layers", c.model.draft_layers);
        bind("model.mlp_ratio", c.model.mlp_ratio);

        bind("decoder.num_blocks", c.decoder.num_blocks);
        bind("decoder.num_heads", c.decoder.num_heads);
        bind("decoder.model_dim", c.decoder.model_dim);
        bind("decoder.mlp_ratio", c.decoder.mlp_ratio);

        bind("pretrain.steps", c.pretrain.steps);
        bind("pretrain.batch", c.pretrain.batch);
        bind("pretrain.lr", c.pretrain.optimizer.lr);
        bind("pretrain.weight_decay", c.pretrain.optimizer.weight_decay);

        bind("schedule.alpha0", c.train.schedule.alpha0);
        bind("schedule.t_freeze_fraction", c.train.schedule.t_freeze_fraction);
        bind("schedule.total_steps", c.train.schedule.total_steps);
        bind("schedule.fixed_alpha", c.train.schedule.fixed_alpha);
        bind("schedule.fixed_alpha_value", c.train.schedule.fixed_alpha_value);

        bind("train.batch", c.train.batch);
        bind("train.real_batch", c.train.real_batch);
        bind("train.draft_lr", c.train.draft_optimizer.lr);
        bind("train.decoder_lr", c.train.decoder_optimizer.lr);
        bind("train.decoder_weight_decay", c.train.decoder_optimizer.weight_decay);
        bind("train.train_draft", c.train.train_draft);
        bind("train.train_decoder", c.train.train_decoder);
        bind("train.entropy_loss", c.train.entropy_loss);
        bind("train.class_grouping", c.train.class_grouping);
        bind("train.unfrozen_prior", c.train.unfrozen_prior);
        bind("train.seed", c.train.seed);

        bind("sigma.sigma_max", c.train.sigma.sigma_max);
        bind("sigma.tau_sigma", c.train.sigma.tau_sigma);
        bind("sigma.entropy_max", c.train.sigma.entropy_max);
        bind("sigma.constant_variance", c.train.sigma.constant_variance);

        bind("kernel.temperatures", c.train.kernel.temperatures);
        bind("kernel.distance_scale", c.train.kernel.distance_scale);
        bind("kernel.repulsion", c.train.kernel.repulsion);

        bind("diffusion.steps", c.diffusion.steps);
        bind("diffusion.batch", c.diffusion.batch);
        bind("diffusion.schedule_steps", c.diffusion.schedule_steps);
        bind("diffusion.lr", c.diffusion.optimizer.lr);

        bind("spec.delta_accept", c.spec.delta_accept);
        bind("spec.max_draft", c.spec.max_draft);
        bind("spec.early_stop", c.spec.early_stop);
        bind("spec.gamma", c.gamma);

        bind("eval.samples", c.eval.samples);
        bind("eval.reference", c.eval.reference);
        bind("eval.analysis_grids", c.eval.analysis_grids);
        bind("eval.bench_episodes", c.eval.bench_episodes);
        bind("eval.sweep_steps", c.eval.sweep_steps);
        bind("eval.sweep_sigmas", c.eval.sweep_sigmas);
        bind("eval.diffusion_steps", c.eval.diffusion_steps);
    }

    bool has(const std::string& key) const { return fields_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = fields_.find(key);
        if (it == fields_.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        it->second.write(value);
    }

    std::string get(const std::string& key) const {
        auto it = fields_.find(key);
        if (it == fields_.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        return it->second.read();
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const auto& [k, f] : fields_) out.push_back(k);
        return out;
    }

private:
    struct Field {
        std::function<std::string()> read;
        std::function<void(const std::string&)> write;
    };

    template <class T>
    void bind(const std::string& key, T& ref) {
        fields_[key] = Field{[&ref] { return detail::fmt_value(ref); },
                             [&ref, key](const std::string& v) { detail::parse_into(key, v, ref); }};
    }

    std::map<std::string, Field> fields_;
};

/// Applies "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
    ConfigBinding b(cfg);
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) {
            line.resize(h);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        b.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    cfg.sync_derived();
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), path);
}

inline std::string config_text(const RunConfig& cfg) {
    RunConfig copy = cfg;
    ConfigBinding b(copy);
    std::string out;
    for (const auto& k : b.keys()) {
        out += k + " = " + b.get(k) + "\n";
    }
    return out;
}

}  // namespace driftar
