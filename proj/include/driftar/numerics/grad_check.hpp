#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "driftar/numerics/autodiff.hpp"

namespace driftar {

/// Scalar-valued function of one tensor, expressed on a tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of `f` at `point`:
///     max_i |g_ad[i] - g_fd[i]| / (|g_fd[i]| + 1e-12)
inline double grad_check(const ScalarFn& f, const Tensor& point, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) {
        throw DomainError("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
    }
    auto eval = [&](const Tensor& x) {
        Tape tape(false);
        const double v = f(tape, tape.constant(x)).value().item();
        if (!std::isfinite(v)) {
            throw NumericError("grad_check: function value is not finite");
        }
        return v;
    };

    Tape tape(true);
    Var x = tape.variable(point);
    Var y = f(tape, x);
    if (!std::isfinite(y.value().item())) {
        throw NumericError("grad_check: function value is not finite");
    }
    tape.backward(y);
    const std::vector<double>& analytic = tape.grad(x);

    double worst = 0.0;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double up = eval(probe);
        probe[i] = orig - eps;
        const double down = eval(probe);
        probe[i] = orig;
        const double fd = (up - down) / (2.0 * eps);
        const double ad = analytic.empty() ? 0.0 : analytic[i];
        worst = std::max(worst, std::abs(ad - fd) / (std::abs(fd) + 1e-12));
    }
    return worst;
}

}  // namespace driftar
