#pragma once

#include <cmath>
#include <functional>

#include "simsyn/core/tensor.hpp"

namespace simsyn::testing {

// Central finite differences of a scalar-valued function of one tensor.
// Independent of the autodiff path by construction.
inline Tensor<double> finite_diff(const std::function<double(const Tensor<double>&)>& f,
                                  Tensor<double> x, double h = 1e-5) {
    Tensor<double> g(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
        double orig = x[i];
        x[i] = orig + h;
        double fp = f(x);
        x[i] = orig - h;
        double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Relative error between analytic and numeric gradients, inf-norm based.
inline double grad_rel_err(const Tensor<double>& analytic, const Tensor<double>& numeric) {
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < analytic.numel(); ++i) {
        num = std::max(num, std::abs(analytic[i] - numeric[i]));
        den = std::max(den, std::abs(numeric[i]));
    }
    return num / std::max(den, 1e-10);
}

}  // namespace simsyn::testing
