#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "driftar/data/format.hpp"
#include "driftar/numerics/rng.hpp"

namespace driftar {

/// h x w grid of d-dimensional continuous tokens with a class label.
struct LatentGrid {
    Tensor tokens;  // [h, w, d]
    int class_id = 0;

    std::size_t height() const { return tokens.shape().at(0); }
    std::size_t width() const { return tokens.shape().at(1); }
    std::size_t dim() const { return tokens.shape().at(2); }
    std::size_t positions() const { return height() * width(); }

    // Raster-order token matrix [h*w x d] (row r = i*w + j).
    Tensor as_sequence() const { return tokens.reshaped(Shape{positions(), dim()}); }

    friend bool operator==(const LatentGrid& a, const LatentGrid& b) {
        return a.class_id == b.class_id && a.tokens.bit_equal(b.tokens);
    }
};

struct DatasetSpec {
    std::size_t h = 8;
    std::size_t w = 8;
    std::size_t d = 8;
    std::size_t num_classes = 4;
    std::size_t num_samples = 2048;
    double smooth_fraction = 0.5;
    double smooth_sigma = 0.05;
    double textured_sigma = 0.5;
    std::uint64_t seed = 1234;

    std::size_t positions() const { return h * w; }

    // Smooth block: the leading raster positions [0, smooth_count).
    std::size_t smooth_count() const {
        return static_cast<std::size_t>(std::llround(smooth_fraction * static_cast<double>(positions())));
    }

    bool is_smooth(std::size_t r) const { return r < smooth_count(); }

    void validate() const {
        if (h == 0 || w == 0 || d == 0) {
            throw ConfigError("dataset dimensions must be positive");
        }
        if (num_classes == 0) {
            throw ConfigError("dataset needs at least one class");
        }
        if (!(smooth_fraction >= 0.0 && smooth_fraction <= 1.0)) {
            throw ConfigError("smooth_fraction " + std::to_string(smooth_fraction) + " outside [0, 1]");
        }
        if (!(smooth_sigma >= 0.0)) {
            throw ConfigError("smooth_sigma must be >= 0");
        }
        if (!(textured_sigma > smooth_sigma)) {
            throw ConfigError("textured_sigma must exceed smooth_sigma");
        }
    }
};

namespace detail {

// Mean over the valid cells of a 3x3 window, per channel.
inline Tensor box_filter3(const Tensor& grid) {
    const std::size_t h = grid.shape()[0], w = grid.shape()[1], d = grid.shape()[2];
    Tensor out(grid.shape());
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            std::size_t count = 0;
            for (std::size_t di = (i ? i - 1 : 0); di <= std::min(h - 1, i + 1); ++di) {
                for (std::size_t dj = (j ? j - 1 : 0); dj <= std::min(w - 1, j + 1); ++dj) {
                    ++count;
                    for (std::size_t c = 0; c < d; ++c) {
                        out[(i * w + j) * d + c] += grid[(di * w + dj) * d + c];
                    }
                }
            }
            for (std::size_t c = 0; c < d; ++c) {
                out[(i * w + j) * d + c] /= static_cast<double>(count);
            }
        }
    }
    return out;
}

// Window sizes of box_filter3, used to renormalize filtered white noise to unit variance.
inline double box_window(std::size_t i, std::size_t j, std::size_t h, std::size_t w) {
    const std::size_t rows = (i > 0) + 1 + (i + 1 < h);
    const std::size_t cols = (j > 0) + 1 + (j + 1 < w);
    return static_cast<double>(rows * cols);
}

}  // namespace detail

/// Deterministic low-frequency pattern for one class, scaled to unit RMS.
inline Tensor class_mean_pattern(const DatasetSpec& spec, int class_id) {
    Rng rng(spec.seed ^ (0xC1A55ULL + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(class_id + 1)));
    Tensor raw = rng.normal_tensor(Shape{spec.h, spec.w, spec.d});
    Tensor smooth = detail::box_filter3(raw);
    double sq = 0.0;
    for (double v : smooth.data()) {
        sq += v * v;
    }
    const double rms = std::sqrt(sq / static_cast<double>(smooth.numel()));
    for (double& v : smooth.values()) {
        v /= rms;
    }
    return smooth;
}

/// Class pattern plus heterogeneous noise: the smooth block gets iid noise at
/// smooth_sigma, the rest gets spatially correlated (3x3 box-filtered,
/// unit-variance) noise at textured_sigma.
inline std::vector<LatentGrid> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<Tensor> means;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        means.push_back(class_mean_pattern(spec, static_cast<int>(c)));
    }
    const std::size_t h = spec.h, w = spec.w, d = spec.d;
    Rng master(spec.seed);
    std::vector<LatentGrid> out;
    out.reserve(spec.num_samples);
    for (std::size_t n = 0; n < spec.num_samples; ++n) {
        Rng rng = master.fork();
        const int cls = static_cast<int>(rng.below(spec.num_classes));
        Tensor white = rng.normal_tensor(Shape{h, w, d});
        Tensor texture = detail::box_filter3(white);
        Tensor tokens = means[static_cast<std::size_t>(cls)];
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t r = i * w + j;
                const double renorm = std::sqrt(detail::box_window(i, j, h, w));
                for (std::size_t c = 0; c < d; ++c) {
                    const std::size_t k = r * d + c;
                    if (spec.is_smooth(r)) {
                        if (spec.smooth_sigma > 0.0) {
                            tokens[k] += spec.smooth_sigma * white[k];
                        }
                    } else {
                        tokens[k] += spec.textured_sigma * renorm * texture[k];
                    }
                }
            }
        }
        out.push_back(LatentGrid{std::move(tokens), cls});
    }
    return out;
}

inline void save_dataset(const std::string& path, const std::vector<LatentGrid>& data, std::size_t num_classes,
                         Shape grid_shape) {
    if (!data.empty()) {
        grid_shape = data.front().tokens.shape();
    }
    if (grid_shape.size() != 3) {
        throw DimensionError("save_dataset: grid shape must be [h, w, d]");
    }
    const std::size_t per = shape_numel(grid_shape);
    std::vector<double> tokens;
    std::vector<double> classes;
    tokens.reserve(per * data.size());
    for (const auto& g : data) {
        if (g.tokens.shape() != grid_shape) {
            throw DimensionError("save_dataset: mixed grid shapes");
        }
        tokens.insert(tokens.end(), g.tokens.data().begin(), g.tokens.data().end());
        classes.push_back(static_cast<double>(g.class_id));
    }
    std::vector<format::NamedTensor> entries;
    entries.emplace_back("dataset.tokens",
                         Tensor(Shape{data.size(), grid_shape[0], grid_shape[1], grid_shape[2]}, std::move(tokens)));
    entries.emplace_back("dataset.class_ids", Tensor(Shape{data.size()}, std::move(classes)));
    entries.emplace_back("dataset.num_classes",
                         Tensor(Shape{1}, std::vector<double>{static_cast<double>(num_classes)}));
    format::write_file(path, entries);
}

struct LoadedDataset {
    std::vector<LatentGrid> grids;
    std::size_t num_classes = 0;
    Shape grid_shape;
};

inline LoadedDataset load_dataset(const std::string& path) {
    auto entries = format::read_file(path);
    const Tensor* tokens = nullptr;
    const Tensor* classes = nullptr;
    const Tensor* ncls = nullptr;
    for (const auto& [name, t] : entries) {
        if (name == "dataset.tokens") tokens = &t;
        if (name == "dataset.class_ids") classes = &t;
        if (name == "dataset.num_classes") ncls = &t;
    }
    std::string missing;
    if (!tokens) missing += " dataset.tokens";
    if (!classes) missing += " dataset.class_ids";
    if (!ncls) missing += " dataset.num_classes";
    if (!missing.empty()) {
        throw FormatError(path + ": missing tensors:" + missing);
    }
    if (tokens->rank() != 4 || classes->rank() != 1 || classes->shape()[0] != tokens->shape()[0]) {
        throw FormatError(path + ": inconsistent dataset tensor shapes");
    }
    LoadedDataset out;
    out.num_classes = static_cast<std::size_t>(ncls->item());
    out.grid_shape = Shape{tokens->shape()[1], tokens->shape()[2], tokens->shape()[3]};
    const std::size_t per = shape_numel(out.grid_shape);
    for (std::size_t n = 0; n < tokens->shape()[0]; ++n) {
        std::vector<double> v(tokens->data().begin() + static_cast<std::ptrdiff_t>(n * per),
                              tokens->data().begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        out.grids.push_back(LatentGrid{Tensor(out.grid_shape, std::move(v)), static_cast<int>((*classes)[n])});
    }
    return out;
}

}  // namespace driftar
