#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "attnseq/tensor.hpp"

namespace attnseq {

// Compares analytic gradients against central differences. `fn` must map the
// current values of `inputs` to a scalar Tensor. Returns the worst relative
// error max(|analytic - numeric|) / max(|analytic|, |numeric|, 1e-8) over all
// input elements.
//
// extra_steps, when given, re-measure a disagreeing coordinate at other step
// sizes and keep the smallest error. A single step cannot serve every
// coordinate of a deep composite: a ReLU pre-activation within h of zero makes
// the central difference straddle the kink and blend the one-sided slopes
// (a finer step lands inside the kink's basin), while a coordinate with a tiny
// gradient drowns in f64 cancellation noise at fine steps (a coarser step
// averages it away). A genuinely wrong gradient fails at every step size.
inline double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double h = 1e-6,
                         const std::vector<double>& extra_steps = {}) {
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = fn();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& t : inputs) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(static_cast<std::size_t>(t.size()), 0.0));
    }

    double worst = 0.0;
    NoGradGuard guard;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& vals = inputs[ti].data_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            const double a = analytic[ti][i];
            auto err_at = [&](double step) {
                vals[i] = orig + step;
                const double up = fn().item();
                vals[i] = orig - step;
                const double down = fn().item();
                vals[i] = orig;
                const double numeric = (up - down) / (2.0 * step);
                const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
                return std::fabs(a - numeric) / denom;
            };
            double err = err_at(h);
            for (double step : extra_steps) {
                if (err <= worst) break;
                err = std::min(err, err_at(step));
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace attnseq
