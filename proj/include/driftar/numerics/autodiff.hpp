#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "driftar/errors.hpp"
#include "driftar/numerics/kernels.hpp"
#include "driftar/numerics/tensor.hpp"

namespace driftar {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode tape over 2-D tensors.
///
/// One tape records one forward pass and is confined to the thread that
/// built it. Nodes that do not depend on any tracked leaf carry no backward
/// closure, so a tape built with gradients disabled is a plain evaluator.
class Tape {
public:
    using Backward = std::function<void(Tape&, const std::vector<double>& grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor value) { return push_leaf(std::move(value), false, nullptr); }

    // Tracked leaf whose gradient is read back with grad().
    Var variable(Tensor value) { return push_leaf(std::move(value), grad_enabled_, nullptr); }

    // Tracked leaf that accumulates its gradient into `param` on backward().
    Var param(Tensor& param) {
        const bool track = grad_enabled_ && param.requires_grad();
        return push_leaf(param, track, track ? &param : nullptr);
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }

    bool tracked(Var v) const { return nodes_.at(v.id).needs_grad; }

    // Gradient buffer of a node after backward(); empty when untouched.
    const std::vector<double>& grad(Var v) const { return nodes_.at(v.id).grad; }

    Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
        bool needs = false;
        for (Var in : inputs) {
            if (in.tape != this) {
                throw StateError("Var recorded on a different tape");
            }
            needs = needs || nodes_[in.id].needs_grad;
        }
        Node node;
        node.value = std::move(value);
        node.needs_grad = needs;
        if (needs) {
            node.backward = std::move(backward);
        }
        nodes_.push_back(std::move(node));
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    // Gradient accumulator for an input, or nullptr if it is untracked.
    std::vector<double>* accum(Var v) {
        Node& n = nodes_[v.id];
        if (!n.needs_grad) {
            return nullptr;
        }
        if (n.grad.empty()) {
            n.grad.assign(n.value.numel(), 0.0);
        }
        return &n.grad;
    }

    void backward(Var loss) {
        Node& root = nodes_.at(loss.id);
        if (root.value.numel() != 1) {
            throw DimensionError("backward() needs a scalar, got " + shape_str(root.value.shape()));
        }
        if (!root.needs_grad) {
            return;
        }
        root.grad.assign(1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) {
                continue;
            }
            if (n.backward) {
                n.backward(*this, n.grad);
            }
            if (n.sink != nullptr) {
                auto& g = n.sink->ensure_grad();
                for (std::size_t j = 0; j < g.size(); ++j) {
                    g[j] += n.grad[j];
                }
            }
        }
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool needs_grad = false;
        Tensor* sink = nullptr;
        Backward backward;
    };

    Var push_leaf(Tensor value, bool track, Tensor* sink) {
        Node node;
        node.value = std::move(value);
        node.value.zero_grad();
        node.needs_grad = track;
        node.sink = sink;
        nodes_.push_back(std::move(node));
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace ad {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " differ");
    }
}

inline Shape mat(std::size_t r, std::size_t c) { return Shape{r, c}; }

template <class Fwd, class Dfdx>
Var unary(Var a, Fwd fwd, Dfdx dfdx) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = fwd(x[i]);
    }
    return a.tape->push(std::move(out), {a}, [a, dfdx](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            const Tensor& x = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * dfdx(x[i]);
            }
        }
    });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_str(A.shape()) + " by " + shape_str(B.shape()));
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C(detail::mat(m, n));
    kernels::gemm_nn(m, k, n, A.data().data(), B.data().data(), C.data().data());
    return a.tape->push(std::move(C), {a, b}, [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            kernels::gemm_nt(m, n, k, g.data(), t.value(b).data().data(), ga->data());
        }
        if (auto* gb = t.accum(b)) {
            kernels::gemm_tn(m, k, n, t.value(a).data().data(), g.data(), gb->data());
        }
    });
}

inline Var add(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    out.zero_grad();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += B[i];
    }
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        for (Var v : {a, b}) {
            if (auto* gv = t.accum(v)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    (*gv)[i] += g[i];
                }
            }
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    out.zero_grad();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] -= B[i];
    }
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i];
            }
        }
        if (auto* gb = t.accum(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i] -= g[i];
            }
        }
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = A[i] * B[i];
    }
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            const Tensor& B = t.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * B[i];
            }
        }
        if (auto* gb = t.accum(b)) {
            const Tensor& A = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i] += g[i] * A[i];
            }
        }
    });
}

inline Var scale(Var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

inline Var square(Var a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var gelu(Var a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return detail::unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x) {
            const double th = std::tanh(c * (x + k * x * x * x));
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
        });
}

inline Var silu(Var a) {
    return detail::unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

// a[m x n] + b[1 x n] broadcast over rows.
inline Var add_row(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (B.numel() != A.cols()) {
        throw DimensionError("add_row: " + shape_str(A.shape()) + " with row " + shape_str(B.shape()));
    }
    Tensor out = A;
    out.zero_grad();
    const std::size_t n = A.cols();
    for (std::size_t i = 0; i < A.rows(); ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += B[j];
        }
    }
    return a.tape->push(std::move(out), {a, b}, [a, b, n](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i];
            }
        }
        if (auto* gb = t.accum(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i % n] += g[i];
            }
        }
    });
}

// a[m x n] * g[1 x n] broadcast over rows.
inline Var mul_row(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (B.numel() != A.cols()) {
        throw DimensionError("mul_row: " + shape_str(A.shape()) + " with row " + shape_str(B.shape()));
    }
    const std::size_t n = A.cols();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) {
        out[i] = A[i] * B[i % n];
    }
    return a.tape->push(std::move(out), {a, b}, [a, b, n](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            const Tensor& B = t.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * B[i % n];
            }
        }
        if (auto* gb = t.accum(b)) {
            const Tensor& A = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i % n] += g[i] * A[i];
            }
        }
    });
}

// a[m x n] * s[m x 1] broadcast over columns.
inline Var mul_col(Var a, Var s) {
    const Tensor& A = a.value();
    const Tensor& S = s.value();
    if (S.numel() != A.rows()) {
        throw DimensionError("mul_col: " + shape_str(A.shape()) + " with column " + shape_str(S.shape()));
    }
    const std::size_t n = A.cols();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) {
        out[i] = A[i] * S[i / n];
    }
    return a.tape->push(std::move(out), {a, s}, [a, s, n](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            const Tensor& S = t.value(s);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * S[i / n];
            }
        }
        if (auto* gs = t.accum(s)) {
            const Tensor& A = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gs)[i / n] += g[i] * A[i];
            }
        }
    });
}

// a[m x n] + p[period x n] tiled down the rows (m must be a multiple of period).
inline Var add_tiled(Var a, Var p) {
    const Tensor& A = a.value();
    const Tensor& P = p.value();
    if (P.cols() != A.cols() || P.rows() == 0 || A.rows() % P.rows() != 0) {
        throw DimensionError("add_tiled: " + shape_str(A.shape()) + " with tile " + shape_str(P.shape()));
    }
    const std::size_t block = P.numel();
    Tensor out = A;
    out.zero_grad();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += P[i % block];
    }
    return a.tape->push(std::move(out), {a, p}, [a, p, block](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i];
            }
        }
        if (auto* gp = t.accum(p)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gp)[i % block] += g[i];
            }
        }
    });
}

// Row-wise normalization to zero mean, unit variance (no affine part).
inline Var layer_norm(Var a, double eps = 1e-5) {
    const Tensor& A = a.value();
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out(A.shape());
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = A.data().data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += x[j];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (x[j] - mean) * (x[j] - mean);
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = (x[j] - mean) * inv_std[i];
        }
    }
    const std::uint32_t out_id = static_cast<std::uint32_t>(a.tape->size());
    return a.tape->push(std::move(out), {a},
                        [a, out_id, m, n, inv_std = std::move(inv_std)](Tape& t, const std::vector<double>& g) {
                            auto* ga = t.accum(a);
                            if (ga == nullptr) {
                                return;
                            }
                            const Tensor& y = t.value(out_id);
                            for (std::size_t i = 0; i < m; ++i) {
                                double mean_g = 0.0, mean_gy = 0.0;
                                for (std::size_t j = 0; j < n; ++j) {
                                    mean_g += g[i * n + j];
                                    mean_gy += g[i * n + j] * y[i * n + j];
                                }
                                mean_g /= static_cast<double>(n);
                                mean_gy /= static_cast<double>(n);
                                for (std::size_t j = 0; j < n; ++j) {
                                    (*ga)[i * n + j] +=
                                        inv_std[i] * (g[i * n + j] - mean_g - y[i * n + j] * mean_gy);
                                }
                            }
                        });
}

/// Row softmax with max subtraction.
///
/// With `causal`, row i of each stacked square block (row index taken modulo
/// the column count) has support [0, i]; entries beyond it are exactly zero
/// and their inputs are ignored.
inline Var softmax_rows(Var a, bool causal) {
    const Tensor& A = a.value();
    if (A.rank() != 2 || A.cols() == 0) {
        throw DimensionError("softmax_rows: expected a non-empty matrix, got " + shape_str(A.shape()));
    }
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t support = causal ? std::min(n, i % n + 1) : n;
        const double* x = A.data().data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < support; ++j) {
            if (std::isnan(x[j])) {
                throw NumericError("softmax_rows: NaN input at (" + std::to_string(i) + "," + std::to_string(j) + ")");
            }
            mx = std::max(mx, x[j]);
        }
        double sum = 0.0;
        double* y = out.data().data() + i * n;
        for (std::size_t j = 0; j < support; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < support; ++j) {
            y[j] /= sum;
        }
    }
    const std::uint32_t out_id = static_cast<std::uint32_t>(a.tape->size());
    return a.tape->push(std::move(out), {a}, [a, out_id, m, n, causal](Tape& t, const std::vector<double>& g) {
        auto* ga = t.accum(a);
        if (ga == nullptr) {
            return;
        }
        const Tensor& y = t.value(out_id);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t support = causal ? std::min(n, i % n + 1) : n;
            double dot = 0.0;
            for (std::size_t j = 0; j < support; ++j) {
                dot += g[i * n + j] * y[i * n + j];
            }
            for (std::size_t j = 0; j < support; ++j) {
                (*ga)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        }
    });
}

/// Scaled dot-product scores for multi-head attention.
///
/// q, k: [batch*T x heads*dh]. Result: [batch*heads*T x T], block (b, h)
/// holding q_h k_h^T * scale. Causal entries above the diagonal are left 0.
inline Var attn_scores(Var q, Var k, std::size_t batch, std::size_t heads, double scale, bool causal) {
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    detail::require_same_shape(Q, K, "attn_scores");
    if (batch == 0 || heads == 0 || Q.rows() % batch != 0 || Q.cols() % heads != 0) {
        throw DimensionError("attn_scores: " + shape_str(Q.shape()) + " not divisible into " + std::to_string(batch) +
                             " sequences of " + std::to_string(heads) + " heads");
    }
    const std::size_t T = Q.rows() / batch, D = Q.cols(), dh = D / heads;
    Tensor S(detail::mat(batch * heads * T, T));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
                const double* qi = Q.data().data() + (b * T + i) * D + h * dh;
                double* srow = S.data().data() + ((b * heads + h) * T + i) * T;
                const std::size_t lim = causal ? i + 1 : T;
                for (std::size_t j = 0; j < lim; ++j) {
                    const double* kj = K.data().data() + (b * T + j) * D + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += qi[c] * kj[c];
                    }
                    srow[j] = s * scale;
                }
            }
        }
    }
    return q.tape->push(std::move(S), {q, k},
                        [q, k, batch, heads, T, D, dh, scale, causal](Tape& t, const std::vector<double>& g) {
                            auto* gq = t.accum(q);
                            auto* gk = t.accum(k);
                            const Tensor& Q = t.value(q);
                            const Tensor& K = t.value(k);
                            for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t h = 0; h < heads; ++h) {
                                    for (std::size_t i = 0; i < T; ++i) {
                                        const std::size_t qoff = (b * T + i) * D + h * dh;
                                        const double* grow = g.data() + ((b * heads + h) * T + i) * T;
                                        const std::size_t lim = causal ? i + 1 : T;
                                        for (std::size_t j = 0; j < lim; ++j) {
                                            const double gs = grow[j] * scale;
                                            if (gs == 0.0) {
                                                continue;
                                            }
                                            const std::size_t koff = (b * T + j) * D + h * dh;
                                            if (gq) {
                                                for (std::size_t c = 0; c < dh; ++c) {
                                                    (*gq)[qoff + c] += gs * K[koff + c];
                                                }
                                            }
                                            if (gk) {
                                                for (std::size_t c = 0; c < dh; ++c) {
                                                    (*gk)[koff + c] += gs * Q[qoff + c];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
}

/// Attention-weighted values: p [batch*heads*T x T], v [batch*T x heads*dh].
inline Var attn_apply(Var p, Var v, std::size_t batch, std::size_t heads, bool causal) {
    const Tensor& P = p.value();
    const Tensor& V = v.value();
    if (batch == 0 || heads == 0 || V.rows() % batch != 0 || V.cols() % heads != 0 ||
        P.rows() != batch * heads * (V.rows() / batch) || P.cols() != V.rows() / batch) {
        throw DimensionError("attn_apply: probabilities " + shape_str(P.shape()) + " do not match values " +
                             shape_str(V.shape()));
    }
    const std::size_t T = V.rows() / batch, D = V.cols(), dh = D / heads;
    Tensor O(V.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
                const double* prow = P.data().data() + ((b * heads + h) * T + i) * T;
                double* orow = O.data().data() + (b * T + i) * D + h * dh;
                const std::size_t lim = causal ? i + 1 : T;
                for (std::size_t j = 0; j < lim; ++j) {
                    const double w = prow[j];
                    const double* vj = V.data().data() + (b * T + j) * D + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        orow[c] += w * vj[c];
                    }
                }
            }
        }
    }
    return p.tape->push(std::move(O), {p, v},
                        [p, v, batch, heads, T, D, dh, causal](Tape& t, const std::vector<double>& g) {
                            auto* gp = t.accum(p);
                            auto* gv = t.accum(v);
                            const Tensor& P = t.value(p);
                            const Tensor& V = t.value(v);
                            for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t h = 0; h < heads; ++h) {
                                    for (std::size_t i = 0; i < T; ++i) {
                                        const std::size_t prow = ((b * heads + h) * T + i) * T;
                                        const double* go = g.data() + (b * T + i) * D + h * dh;
                                        const std::size_t lim = causal ? i + 1 : T;
                                        for (std::size_t j = 0; j < lim; ++j) {
                                            const std::size_t voff = (b * T + j) * D + h * dh;
                                            if (gp) {
                                                double s = 0.0;
                                                for (std::size_t c = 0; c < dh; ++c) {
                                                    s += go[c] * V[voff + c];
                                                }
                                                (*gp)[prow + j] += s;
                                            }
                                            if (gv) {
                                                const double w = P[prow + j];
                                                for (std::size_t c = 0; c < dh; ++c) {
                                                    (*gv)[voff + c] += w * go[c];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
}

// Average the per-head blocks of [batch*heads*T x T] into [batch*T x T].
inline Var head_mean(Var p, std::size_t batch, std::size_t heads) {
    const Tensor& P = p.value();
    const std::size_t T = P.cols();
    if (batch == 0 || heads == 0 || P.rows() != batch * heads * T) {
        throw DimensionError("head_mean: " + shape_str(P.shape()) + " is not " + std::to_string(batch) + "x" +
                             std::to_string(heads) + " square blocks");
    }
    const double w = 1.0 / static_cast<double>(heads);
    Tensor out(detail::mat(batch * T, T));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double* src = P.data().data() + (b * heads + h) * T * T;
            double* dst = out.data().data() + b * T * T;
            for (std::size_t i = 0; i < T * T; ++i) {
                dst[i] += w * src[i];
            }
        }
    }
    return p.tape->push(std::move(out), {p}, [p, batch, heads, T, w](Tape& t, const std::vector<double>& g) {
        if (auto* gp = t.accum(p)) {
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    double* dst = gp->data() + (b * heads + h) * T * T;
                    const double* src = g.data() + b * T * T;
                    for (std::size_t i = 0; i < T * T; ++i) {
                        dst[i] += w * src[i];
                    }
                }
            }
        }
    });
}

/// Causal-normalized row entropy of stacked square probability blocks.
///
/// Row i of a block has support s = i + 1 and entropy -sum p log p / log s,
/// with 0 log 0 = 0. Rows with s < 2 have no defined value and get `fill`.
/// Returns a [rows x 1] column.
inline Var causal_row_entropy(Var p, double fill) {
    const Tensor& P = p.value();
    const std::size_t m = P.rows(), n = P.cols();
    Tensor out(detail::mat(m, 1));
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t s = i % n + 1;
        if (s < 2) {
            out[i] = fill;
            continue;
        }
        double h = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
            const double pj = P[i * n + j];
            if (pj > 0.0) {
                h -= pj * std::log(pj);
            }
        }
        out[i] = h / std::log(static_cast<double>(s));
    }
    return p.tape->push(std::move(out), {p}, [p, m, n](Tape& t, const std::vector<double>& g) {
        auto* gp = t.accum(p);
        if (gp == nullptr) {
            return;
        }
        const Tensor& P = t.value(p);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t s = i % n + 1;
            if (s < 2 || g[i] == 0.0) {
                continue;
            }
            const double inv_log = 1.0 / std::log(static_cast<double>(s));
            for (std::size_t j = 0; j < s; ++j) {
                const double pj = P[i * n + j];
                if (pj > 0.0) {
                    (*gp)[i * n + j] += -g[i] * (std::log(pj) + 1.0) * inv_log;
                }
            }
        }
    });
}

inline Var gather_rows(Var a, std::vector<std::size_t> index) {
    const Tensor& A = a.value();
    const std::size_t n = A.cols();
    Tensor out(detail::mat(index.size(), n));
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= A.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " out of " + shape_str(A.shape()));
        }
        std::copy_n(A.data().data() + index[r] * n, n, out.data().data() + r * n);
    }
    return a.tape->push(std::move(out), {a}, [a, n, index = std::move(index)](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (std::size_t r = 0; r < index.size(); ++r) {
                for (std::size_t j = 0; j < n; ++j) {
                    (*ga)[index[r] * n + j] += g[r * n + j];
                }
            }
        }
    });
}

// Each row of a[B x n] repeated `times` consecutively -> [B*times x n].
inline Var repeat_rows(Var a, std::size_t times) {
    std::vector<std::size_t> index;
    index.reserve(a.rows() * times);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        index.insert(index.end(), times, r);
    }
    return gather_rows(a, std::move(index));
}

// Interleave: for each of B sequences, the row of `head` followed by its
// `len` rows of `body` -> [B*(len+1) x n].
inline Var prepend_rows(Var head, Var body, std::size_t len) {
    const Tensor& H = head.value();
    const Tensor& Bd = body.value();
    const std::size_t batch = H.rows(), n = H.cols();
    if (Bd.cols() != n || Bd.rows() != batch * len) {
        throw DimensionError("prepend_rows: head " + shape_str(H.shape()) + " body " + shape_str(Bd.shape()));
    }
    Tensor out(detail::mat(batch * (len + 1), n));
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(H.data().data() + b * n, n, out.data().data() + b * (len + 1) * n);
        std::copy_n(Bd.data().data() + b * len * n, len * n, out.data().data() + (b * (len + 1) + 1) * n);
    }
    return head.tape->push(std::move(out), {head, body},
                           [head, body, batch, len, n](Tape& t, const std::vector<double>& g) {
                               auto* gh = t.accum(head);
                               auto* gb = t.accum(body);
                               for (std::size_t b = 0; b < batch; ++b) {
                                   const double* src = g.data() + b * (len + 1) * n;
                                   if (gh) {
                                       for (std::size_t j = 0; j < n; ++j) {
                                           (*gh)[b * n + j] += src[j];
                                       }
                                   }
                                   if (gb) {
                                       for (std::size_t j = 0; j < len * n; ++j) {
                                           (*gb)[b * len * n + j] += src[n + j];
                                       }
                                   }
                               }
                           });
}

inline Var concat_cols(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rows() != B.rows()) {
        throw DimensionError("concat_cols: " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    }
    const std::size_t m = A.rows(), p = A.cols(), q = B.cols();
    Tensor out(detail::mat(m, p + q));
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(A.data().data() + i * p, p, out.data().data() + i * (p + q));
        std::copy_n(B.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
    }
    return a.tape->push(std::move(out), {a, b}, [a, b, m, p, q](Tape& t, const std::vector<double>& g) {
        auto* ga = t.accum(a);
        auto* gb = t.accum(b);
        for (std::size_t i = 0; i < m; ++i) {
            if (ga) {
                for (std::size_t j = 0; j < p; ++j) {
                    (*ga)[i * p + j] += g[i * (p + q) + j];
                }
            }
            if (gb) {
                for (std::size_t j = 0; j < q; ++j) {
                    (*gb)[i * q + j] += g[i * (p + q) + p + j];
                }
            }
        }
    });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const Tensor& A = a.value();
    const std::size_t m = A.rows(), n = A.cols();
    if (start + len > n) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of " + shape_str(A.shape()));
    }
    Tensor out(detail::mat(m, len));
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(A.data().data() + i * n + start, len, out.data().data() + i * len);
    }
    return a.tape->push(std::move(out), {a}, [a, m, n, start, len](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < len; ++j) {
                    (*ga)[i * n + start + j] += g[i * len + j];
                }
            }
        }
    });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) {
        s += v;
    }
    return a.tape->push(Tensor::scalar(s), {a}, [a](Tape& t, const std::vector<double>& g) {
        if (auto* ga = t.accum(a)) {
            for (double& v : *ga) {
                v += g[0];
            }
        }
    });
}

inline Var mean(Var a) {
    const double n = static_cast<double>(a.value().numel());
    if (n == 0) {
        throw DimensionError("mean of empty tensor");
    }
    return scale(sum(a), 1.0 / n);
}

// Mean over rows of the squared L2 norm of each row.
inline Var mean_row_sqnorm(Var a) {
    return scale(sum(square(a)), 1.0 / static_cast<double>(a.rows()));
}

// Mean Smooth-L1 with transition at beta.
inline Var smooth_l1_mean(Var pred, Var target, double beta = 1.0) {
    detail::require_same_shape(pred.value(), target.value(), "smooth_l1");
    Var diff = sub(pred, target);
    Var elem = detail::unary(
        diff,
        [beta](double u) {
            const double au = std::abs(u);
            return au < beta ? 0.5 * u * u / beta : au - 0.5 * beta;
        },
        [beta](double u) {
            const double au = std::abs(u);
            return au < beta ? u / beta : (u > 0 ? 1.0 : -1.0);
        });
    return mean(elem);
}

// Value copy with no gradient path.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace ad

}  // namespace driftar
