#pragma once

#include <functional>

#include "taalm/tensor.hpp"

namespace taalm {

// Central-difference comparison against an analytic gradient. `value_fn` must be
// deterministic (checked by evaluating the base point twice); `grad_fn` returns
// the analytic gradient at a point. Returns the max over coordinates of
//   |analytic - fd| / (|fd| + 1e-12).
template <typename T>
double grad_check(const std::function<T(const Tensor<T>&)>& value_fn,
                  const std::function<Tensor<T>(const Tensor<T>&)>& grad_fn,
                  const Tensor<T>& point, T step) {
    if (!(step > T(0))) {
        throw NumericError("grad_check: step must be positive");
    }
    const T f0 = value_fn(point);
    const T f0_again = value_fn(point);
    if (f0 != f0_again) {
        throw NumericError("grad_check: non-deterministic function detected");
    }
    const Tensor<T> analytic = grad_fn(point);
    if (!analytic.same_shape(point)) {
        throw NumericError("grad_check: gradient shape mismatch");
    }
    double worst = 0.0;
    Tensor<T> x = point;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T keep = x[i];
        x[i] = keep + step;
        const T fp = value_fn(x);
        x[i] = keep - step;
        const T fm = value_fn(x);
        x[i] = keep;
        const double fd = (static_cast<double>(fp) - static_cast<double>(fm)) /
                          (2.0 * static_cast<double>(step));
        const double rel = std::abs(static_cast<double>(analytic[i]) - fd) / (std::abs(fd) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace taalm
