#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dasnet/rng.hpp"
#include "dasnet/tensor.hpp"

namespace dasnet {

struct GradCheckEntry {
    std::string parameter;
    std::int64_t element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::vector<GradCheckEntry> per_parameter_errors;
};

inline double gradcheck_relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Central-difference check of reverse-mode gradients. `loss_fn` must rebuild
// the graph from the current parameter values on every call; parameters are
// perturbed in place. With probes_per_param < 0 every element is checked,
// otherwise that many elements are sampled per parameter (seeded).
// skip_below_abs drops probes where both gradients sit under the floor; at
// 32-bit precision such elements measure quantization noise, not agreement.
template <class S>
GradCheckReport finite_diff_gradcheck(
    const std::function<Tensor<S>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<S>>>& params, S epsilon = S(1e-3),
    int probes_per_param = -1, std::uint64_t probe_seed = 0x9a75,
    double skip_below_abs = 0.0) {
    if (epsilon <= S(0)) throw ConfigError("finite_diff_gradcheck: epsilon must be positive");

    std::vector<std::vector<S>> analytic;
    {
        GradModeGuard grad_on(true);
        for (auto& [name, p] : params) {
            const_cast<Tensor<S>&>(p).zero_grad();
            const_cast<Tensor<S>&>(p).set_requires_grad(true);
        }
        Tensor<S> loss = loss_fn();
        backward(loss);
        for (auto& [name, p] : params) {
            const_cast<Tensor<S>&>(p).grad();  // materialize zeros if unreached
            analytic.push_back(p.node()->grad);
        }
    }

    GradCheckReport report;
    Rng rng(probe_seed);
    GradModeGuard grad_off(false);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const std::string& name = params[pi].first;
        Tensor<S>& p = const_cast<Tensor<S>&>(params[pi].second);
        const std::int64_t count = p.numel();
        std::vector<std::int64_t> idx;
        if (probes_per_param < 0 || probes_per_param >= count) {
            idx.resize(static_cast<std::size_t>(count));
            for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i;
        } else {
            for (int k = 0; k < probes_per_param; ++k)
                idx.push_back(rng.uniform_int(0, static_cast<int>(count - 1)));
        }
        double worst = -1.0;
        GradCheckEntry worst_entry;
        for (std::int64_t i : idx) {
            const S saved = p.data()[i];
            p.data()[i] = saved + epsilon;
            const double f_plus = static_cast<double>(loss_fn().item());
            p.data()[i] = saved - epsilon;
            const double f_minus = static_cast<double>(loss_fn().item());
            p.data()[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(epsilon));
            const double a = static_cast<double>(analytic[pi][static_cast<std::size_t>(i)]);
            if (std::max(std::abs(a), std::abs(numeric)) < skip_below_abs) continue;
            const double rel = gradcheck_relative_error(a, numeric);
            if (rel > worst) {
                worst = rel;
                worst_entry = {name, i, a, numeric, rel};
            }
        }
        report.per_parameter_errors.push_back(worst_entry);
        if (worst > report.max_relative_error) {
            report.max_relative_error = worst;
            report.worst_parameter = name;
        }
    }
    return report;
}

}  // namespace dasnet
