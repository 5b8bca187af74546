#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Dense kernels with a fixed accumulation order: every output element is
// summed over the inner index in increasing order, independent of how many
// rows or columns the surrounding matrices have. Row i of a product therefore
// depends only on row i of the left operand, which makes causal prefixes
// bit-reproducible across sequence lengths.

namespace driftar::kernels {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                cp[j] += av * bi[j];
            }
        }
    }
}

// out[n x m] = a[m x n]^T
inline void transpose(std::size_t m, std::size_t n, const double* a, double* out) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = a[i * n + j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    std::vector<double> bt(k * n);
    transpose(n, k, b, bt.data());
    gemm_nn(m, k, n, a, bt.data(), c);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

}  // namespace driftar::kernels
