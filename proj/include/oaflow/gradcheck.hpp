#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "oaflow/tensor.hpp"

namespace oaflow {

// Central-difference verification of reverse-mode gradients.
//
// f must be a deterministic closure over `params` that rebuilds its graph on
// every call and returns a scalar. Returns the max over all parameter
// elements of |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
template <class Real>
Real finite_diff_check(const std::function<Tensor<Real>()>& f,
                       std::vector<Tensor<Real>> params, Real eps) {
    if (eps <= Real(0)) throw std::invalid_argument("finite_diff_check: eps must be > 0");

    Tensor<Real> out = f();
    if (!std::isfinite(double(out.item())))
        throw std::runtime_error("finite_diff_check: non-finite function output");
    for (auto& p : params) p.clear_grad();
    backward(out);

    std::vector<std::vector<Real>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<Real>(p.numel(), Real(0)));

    Real worst = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].mutable_value();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const Real keep = vals[i];
            vals[i] = keep + eps;
            const Real fp = f().item();
            vals[i] = keep - eps;
            const Real fm = f().item();
            vals[i] = keep;
            if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
                throw std::runtime_error("finite_diff_check: non-finite probe output");
            const Real numeric = (fp - fm) / (Real(2) * eps);
            const Real a = analytic[pi][i];
            const Real denom = std::max(Real(1e-12), std::abs(a) + std::abs(numeric));
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace oaflow
