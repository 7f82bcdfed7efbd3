#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fixnoise/rng.hpp"
#include "fixnoise/tensor.hpp"

namespace fixnoise {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t nonsmooth = 0;  // probes whose bracket straddled a kink, re-measured with a finer step
    std::string worst;          // "<input>[<flat index>]" of the largest error

    bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

/// |a - f| / max(|a|, |f|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences with step 1e-4 * max(1, |x|) against the reverse-mode
/// gradient of a scalar function of leaf tensors. When `max_probes` is
/// nonzero, each input is probed at that many positions drawn from `seed`.
///
/// Leaky ReLU makes the networks piecewise smooth. A mismatching probe is
/// re-measured with a 100x finer step; for a smooth function the two central
/// differences agree to O(h^2), so disagreement beyond 1e-6 relative means a
/// kink lies inside the coarse bracket and the finer estimate is used.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<std::pair<std::string, Tensor>> inputs,
                                       std::size_t max_probes = 0, std::uint64_t seed = 0) {
    for (auto& [_, t] : inputs) {
        if (!t.is_leaf()) throw ContractError("check_gradients probes leaf tensors only");
        t.set_requires_grad(true);
        t.zero_grad();
    }
    const Tensor loss = loss_fn();
    loss.backward();

    GradCheckResult result;
    Rng rng(seed);
    for (auto& [name, t] : inputs) {
        std::vector<std::size_t> probes(t.numel());
        for (std::size_t i = 0; i < probes.size(); ++i) probes[i] = i;
        if (max_probes != 0 && probes.size() > max_probes) {
            rng.shuffle(probes);
            probes.resize(max_probes);
        }
        for (std::size_t i : probes) {
            const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
            double& x = t.mutable_data()[i];
            const double saved = x;
            const double h = 1e-4 * std::max(1.0, std::abs(saved));
            auto central = [&](double step) {
                x = saved + step;
                const double plus = loss_fn().item();
                x = saved - step;
                const double minus = loss_fn().item();
                x = saved;
                return (plus - minus) / (2.0 * step);
            };
            double numeric = central(h);
            double err = relative_error(analytic, numeric);
            if (err > 1e-6) {
                const double fine = central(h * 1e-2);
                if (relative_error(numeric, fine) > 1e-6) {
                    ++result.nonsmooth;
                    numeric = fine;
                    err = relative_error(analytic, numeric);
                }
            }
            ++result.checked;
            if (err >= result.max_rel_error) {
                result.max_rel_error = err;
                result.worst = name + "[" + std::to_string(i) + "]";
            }
        }
        t.zero_grad();
    }
    return result;
}

}  // namespace fixnoise
