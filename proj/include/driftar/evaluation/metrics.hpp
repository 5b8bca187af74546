#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "driftar/ar_core/generate.hpp"
#include "driftar/numerics/tensor.hpp"

namespace driftar {

namespace detail {

inline double row_sqdist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    const std::size_t k = a.cols();
    const double* x = a.data().data() + i * k;
    const double* y = b.data().data() + j * k;
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        const double t = x[c] - y[c];
        s += t * t;
    }
    return s;
}

inline double mixture_kernel(double sq, const std::vector<double>& bandwidths) {
    double s = 0.0;
    for (double h : bandwidths) {
        s += std::exp(-sq / (2.0 * h * h));
    }
    return s / static_cast<double>(bandwidths.size());
}

inline void check_mmd_inputs(const Tensor& a, const Tensor& b, const std::vector<double>& bandwidths) {
    if (a.rows() < 2 || b.rows() < 2) {
        throw DomainError("mmd needs at least 2 samples per side, got " + std::to_string(a.rows()) + " and " +
                          std::to_string(b.rows()));
    }
    if (a.cols() != b.cols()) {
        throw DimensionError("mmd: sample widths " + std::to_string(a.cols()) + " and " + std::to_string(b.cols()));
    }
    if (bandwidths.empty()) {
        throw DomainError("mmd needs at least one bandwidth");
    }
    for (double h : bandwidths) {
        if (!(h > 0.0)) {
            throw DomainError("mmd bandwidths must be positive");
        }
    }
}

}  // namespace detail

/// Unbiased squared MMD with an equal-weight mixture of Gaussian kernels
/// exp(-||x - y||^2 / (2 h^2)).
inline double mmd(const Tensor& a, const Tensor& b, const std::vector<double>& bandwidths) {
    detail::check_mmd_inputs(a, b, bandwidths);
    const std::size_t n = a.rows(), m = b.rows();
    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            kaa += detail::mixture_kernel(detail::row_sqdist(a, i, a, j), bandwidths);
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i + 1; j < m; ++j) {
            kbb += detail::mixture_kernel(detail::row_sqdist(b, i, b, j), bandwidths);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            kab += detail::mixture_kernel(detail::row_sqdist(a, i, b, j), bandwidths);
        }
    }
    const double dn = static_cast<double>(n), dm = static_cast<double>(m);
    return 2.0 * kaa / (dn * (dn - 1.0)) + 2.0 * kbb / (dm * (dm - 1.0)) - 2.0 * kab / (dn * dm);
}

// Biased (V-statistic) variant; exactly zero on identical sets up to rounding.
inline double mmd_biased(const Tensor& a, const Tensor& b, const std::vector<double>& bandwidths) {
    detail::check_mmd_inputs(a, b, bandwidths);
    auto block = [&](const Tensor& x, const Tensor& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            for (std::size_t j = 0; j < y.rows(); ++j) {
                s += detail::mixture_kernel(detail::row_sqdist(x, i, y, j), bandwidths);
            }
        }
        return s / static_cast<double>(x.rows() * y.rows());
    };
    return block(a, a) + block(b, b) - 2.0 * block(a, b);
}

/// Median pairwise distance over the pooled sample.
inline double median_distance(const Tensor& a, const Tensor& b) {
    std::vector<double> d;
    const std::size_t n = a.rows(), m = b.rows();
    auto row = [&](std::size_t i) -> std::pair<const Tensor*, std::size_t> {
        return i < n ? std::pair{&a, i} : std::pair{&b, i - n};
    };
    for (std::size_t i = 0; i < n + m; ++i) {
        for (std::size_t j = i + 1; j < n + m; ++j) {
            auto [x, xi] = row(i);
            auto [y, yj] = row(j);
            d.push_back(std::sqrt(detail::row_sqdist(*x, xi, *y, yj)));
        }
    }
    if (d.empty()) {
        throw DomainError("median distance of fewer than two samples");
    }
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
}

inline std::vector<double> median_bandwidths(double median) {
    if (!(median > 0.0)) {
        throw DomainError("median pairwise distance is zero; bandwidth undefined");
    }
    return {0.5 * median, median, 2.0 * median};
}

/// mmd with bandwidths median * {0.5, 1, 2} taken from the pooled sample.
inline double mmd_auto(const Tensor& a, const Tensor& b) { return mmd(a, b, median_bandwidths(median_distance(a, b))); }

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw DomainError("pearson needs two equal-length samples of size >= 2");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw DomainError("correlation undefined: a sample has zero variance");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Least-squares slope of y on x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) {
        throw DomainError("slope undefined: x has zero variance");
    }
    return sxy / sxx;
}

struct EntropyBin {
    double center = 0.0;
    double mean_error = 0.0;
    std::size_t count = 0;
};

struct EntropyErrorAnalysis {
    double pearson_r = 0.0;
    double slope = 0.0;
    std::vector<double> entropy;
    std::vector<double> error;
    std::vector<EntropyBin> bins;  // all bins, including sparse ones

    // Bins with at least min_count samples.
    std::vector<EntropyBin> populated(std::size_t min_count = 20) const {
        std::vector<EntropyBin> out;
        for (const auto& b : bins) {
            if (b.count >= min_count) {
                out.push_back(b);
            }
        }
        return out;
    }

    bool monotone_bins(std::size_t min_count = 20) const {
        const auto p = populated(min_count);
        for (std::size_t i = 1; i < p.size(); ++i) {
            if (p[i].mean_error < p[i - 1].mean_error) {
                return false;
            }
        }
        return true;
    }
};

/// Correlation and equal-width binning over the observed entropy range.
inline EntropyErrorAnalysis analyze_entropy_error(std::vector<double> entropy, std::vector<double> error,
                                                  std::size_t num_bins = 10) {
    EntropyErrorAnalysis a;
    a.pearson_r = pearson(entropy, error);
    a.slope = ols_slope(entropy, error);
    const auto [lo_it, hi_it] = std::minmax_element(entropy.begin(), entropy.end());
    const double lo = *lo_it, hi = *hi_it, width = (hi - lo) / static_cast<double>(num_bins);
    a.bins.resize(num_bins);
    std::vector<double> sums(num_bins, 0.0);
    for (std::size_t i = 0; i < entropy.size(); ++i) {
        std::size_t b = static_cast<std::size_t>((entropy[i] - lo) / width);
        b = std::min(b, num_bins - 1);
        sums[b] += error[i];
        ++a.bins[b].count;
    }
    for (std::size_t b = 0; b < num_bins; ++b) {
        a.bins[b].center = lo + (static_cast<double>(b) + 0.5) * width;
        a.bins[b].mean_error = a.bins[b].count ? sums[b] / static_cast<double>(a.bins[b].count) : 0.0;
    }
    a.entropy = std::move(entropy);
    a.error = std::move(error);
    return a;
}

/// Teacher-forced (entropy, ||z_AR - x_gt||) pairs of the target over grids,
/// skipping the first position whose entropy is fixed by convention.
inline EntropyErrorAnalysis entropy_error_correlation(const ModelParams& target, const TransformerConfig& cfg,
                                                      const std::vector<Tensor>& grids, const std::vector<int>& classes,
                                                      std::size_t num_bins = 10) {
    std::vector<double> ent, err;
    for (std::size_t g = 0; g < grids.size(); ++g) {
        ARForwardResult res = forward(target, cfg, grids[g], classes.at(g));
        const auto e = position_entropies(res, penultimate_layer(cfg));
        for (std::size_t r = 1; r < res.positions(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cfg.token_dim; ++c) {
                const double t = res.predicted_features(r, c) - grids[g](r, c);
                s += t * t;
            }
            ent.push_back(e[r]);
            err.push_back(std::sqrt(s));
        }
    }
    return analyze_entropy_error(std::move(ent), std::move(err), num_bins);
}

struct SpeedupResult {
    double speedup = 0.0;
    double baseline_median_ns = 0.0;
    double accelerated_median_ns = 0.0;
    std::vector<std::int64_t> baseline_ns;     // kept episodes only
    std::vector<std::int64_t> accelerated_ns;
};

inline double median_of(std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? static_cast<double>(v[n / 2]) : 0.5 * static_cast<double>(v[n / 2 - 1] + v[n / 2]);
}

/// Median baseline time over median accelerated time. Episodes alternate
/// between the two callables; the first `warmup` episodes are discarded.
inline SpeedupResult bench_speedup(const std::function<void(std::size_t)>& baseline,
                                   const std::function<void(std::size_t)>& accelerated, std::size_t episodes,
                                   std::size_t warmup = 3) {
    if (episodes < 10 || warmup >= episodes) {
        throw DomainError("bench_speedup needs at least 10 episodes beyond warm-up, got " + std::to_string(episodes));
    }
    using clock = std::chrono::steady_clock;
    SpeedupResult r;
    for (std::size_t e = 0; e < episodes; ++e) {
        auto t0 = clock::now();
        baseline(e);
        auto t1 = clock::now();
        accelerated(e);
        auto t2 = clock::now();
        if (e < warmup) {
            continue;
        }
        r.baseline_ns.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
        r.accelerated_ns.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count());
    }
    r.baseline_median_ns = median_of(r.baseline_ns);
    r.accelerated_median_ns = median_of(r.accelerated_ns);
    if (r.accelerated_median_ns <= 0.0) {
        throw MeasurementError("accelerated episodes took zero time");
    }
    r.speedup = r.baseline_median_ns / r.accelerated_median_ns;
    return r;
}

}  // namespace driftar
