#pragma once

#include <cmath>
#include <vector>

#include "dasnet/ops.hpp"

namespace dasnet {

// Single-sample focal term, straight from the definition. p_t is the
// predicted probability of the true class.
inline double focal_term(double p_t, double alpha, double gamma) {
    p_t = std::min(std::max(p_t, 1e-7), 1.0 - 1e-7);
    return -alpha * std::pow(1.0 - p_t, gamma) * std::log(p_t);
}

// Focal loss over sigmoid logits. targets in {0,1}; include 1 counts the
// entry, 0 skips it (ignore band). Positives weigh alpha, negatives 1-alpha.
// Sum divided by `normalizer` (caller passes max(1, positive count)).
template <class S>
Tensor<S> sigmoid_focal_loss(const Tensor<S>& logits, std::vector<S> targets,
                             std::vector<S> include, S alpha, S gamma, S normalizer) {
    const std::size_t count = logits.values().size();
    if (targets.size() != count || include.size() != count)
        throw ConfigError("sigmoid_focal_loss: target/include size mismatch");
    if (normalizer <= S(0)) throw ConfigError("sigmoid_focal_loss: normalizer must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        if (include[i] == S(0)) continue;
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data()[i])));
        const bool pos = targets[i] > S(0.5);
        const double a = pos ? static_cast<double>(alpha) : 1.0 - static_cast<double>(alpha);
        acc += focal_term(pos ? p : 1.0 - p, a, static_cast<double>(gamma));
    }
    acc /= static_cast<double>(normalizer);

    auto bw = [logits, targets = std::move(targets), include = std::move(include), alpha, gamma,
               normalizer](detail::TensorNode<S>& node) {
        if (!logits.needs_grad()) return;
        auto& dz = logits.node()->ensure_grad();
        const double g0 = static_cast<double>(node.grad[0]) / static_cast<double>(normalizer);
        const double gam = static_cast<double>(gamma);
        for (std::size_t i = 0; i < dz.size(); ++i) {
            if (include[i] == S(0)) continue;
            const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data()[i])));
            const bool pos = targets[i] > S(0.5);
            const double a = pos ? static_cast<double>(alpha) : 1.0 - static_cast<double>(alpha);
            double pt = pos ? p : 1.0 - p;
            pt = std::min(std::max(pt, 1e-7), 1.0 - 1e-7);
            const double q = 1.0 - pt;
            // d/dp_t of -a * q^gamma * log(p_t)
            double dpt = -a * std::pow(q, gam) / pt;
            if (gam > 0.0) dpt += a * gam * std::pow(q, gam - 1.0) * std::log(pt);
            const double dp_dz = p * (1.0 - p);
            const double dz_i = dpt * (pos ? dp_dz : -dp_dz);
            dz[i] += static_cast<S>(g0 * dz_i);
        }
    };
    return detail::finite_result<S>("sigmoid_focal_loss", {1, 1, 1, 1},
                                    {static_cast<S>(acc)}, {logits}, std::move(bw));
}

// Smooth-L1 (Huber with delta 1) over masked entries, divided by normalizer.
template <class S>
Tensor<S> smooth_l1_loss(const Tensor<S>& pred, std::vector<S> targets, std::vector<S> include,
                         S normalizer) {
    const std::size_t count = pred.values().size();
    if (targets.size() != count || include.size() != count)
        throw ConfigError("smooth_l1_loss: target/include size mismatch");
    if (normalizer <= S(0)) throw ConfigError("smooth_l1_loss: normalizer must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        if (include[i] == S(0)) continue;
        const double d = static_cast<double>(pred.data()[i]) - targets[i];
        const double ad = std::abs(d);
        acc += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
    }
    acc /= static_cast<double>(normalizer);
    auto bw = [pred, targets = std::move(targets), include = std::move(include),
               normalizer](detail::TensorNode<S>& node) {
        if (!pred.needs_grad()) return;
        auto& dz = pred.node()->ensure_grad();
        const double g0 = static_cast<double>(node.grad[0]) / static_cast<double>(normalizer);
        for (std::size_t i = 0; i < dz.size(); ++i) {
            if (include[i] == S(0)) continue;
            const double d = static_cast<double>(pred.data()[i]) - targets[i];
            const double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
            dz[i] += static_cast<S>(g0 * dd);
        }
    };
    return detail::finite_result<S>("smooth_l1_loss", {1, 1, 1, 1}, {static_cast<S>(acc)},
                                    {pred}, std::move(bw));
}

// Two-class cross-entropy from logits (n,2,h,w) against per-pixel labels in
// {0,1}, with an include mask; fused log-softmax keeps it stable.
template <class S>
Tensor<S> softmax2_ce_loss(const Tensor<S>& logits, std::vector<S> labels, std::vector<S> include,
                           S normalizer) {
    const Shape4 ls = logits.shape();
    if (ls.c != 2) throw ConfigError("softmax2_ce_loss: expected 2 channels");
    const std::int64_t plane = static_cast<std::int64_t>(ls.h) * ls.w;
    const std::int64_t pixels = static_cast<std::int64_t>(ls.n) * plane;
    if (static_cast<std::int64_t>(labels.size()) != pixels ||
        static_cast<std::int64_t>(include.size()) != pixels)
        throw ConfigError("softmax2_ce_loss: label/include size mismatch");
    if (normalizer <= S(0)) throw ConfigError("softmax2_ce_loss: normalizer must be positive");
    double acc = 0.0;
    for (int n = 0; n < ls.n; ++n) {
        const S* z = logits.data() + static_cast<std::int64_t>(n) * 2 * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            const std::int64_t pix = static_cast<std::int64_t>(n) * plane + i;
            if (include[pix] == S(0)) continue;
            const double z0 = z[i], z1 = z[plane + i];
            const double m = std::max(z0, z1);
            const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
            const double zt = labels[pix] > S(0.5) ? z1 : z0;
            acc += lse - zt;
        }
    }
    acc /= static_cast<double>(normalizer);
    auto bw = [logits, labels = std::move(labels), include = std::move(include), normalizer, ls,
               plane](detail::TensorNode<S>& node) {
        if (!logits.needs_grad()) return;
        auto& dz = logits.node()->ensure_grad();
        const double g0 = static_cast<double>(node.grad[0]) / static_cast<double>(normalizer);
        for (int n = 0; n < ls.n; ++n) {
            const std::int64_t base = static_cast<std::int64_t>(n) * 2 * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const std::int64_t pix = static_cast<std::int64_t>(n) * plane + i;
                if (include[pix] == S(0)) continue;
                const double z0 = logits.data()[base + i], z1 = logits.data()[base + plane + i];
                const double m = std::max(z0, z1);
                const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
                const double p1 = e1 / (e0 + e1);
                const bool t1 = labels[pix] > S(0.5);
                dz[base + i] += static_cast<S>(g0 * ((1.0 - p1) - (t1 ? 0.0 : 1.0)));
                dz[base + plane + i] += static_cast<S>(g0 * (p1 - (t1 ? 1.0 : 0.0)));
            }
        }
    };
    return detail::finite_result<S>("softmax2_ce_loss", {1, 1, 1, 1}, {static_cast<S>(acc)},
                                    {logits}, std::move(bw));
}

}  // namespace dasnet
