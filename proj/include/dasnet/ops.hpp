#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dasnet/tensor.hpp"

namespace dasnet {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <class S>
void check_finite(const std::vector<S>& v, const char* op) {
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> m(v.data(),
                                                           static_cast<Eigen::Index>(v.size()));
    if (!m.allFinite())
        throw NumericError(std::string(op) + ": non-finite value in operator output");
}

namespace detail {

template <class S>
Tensor<S> finite_result(const char* op, Shape4 shape, std::vector<S> values,
                        std::vector<Tensor<S>> inputs,
                        std::function<void(TensorNode<S>&)> backward) {
    check_finite(values, op);
    return make_result<S>(shape, std::move(values), std::move(inputs), std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// convolution (cross-correlation, no kernel flip)

struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kh = 1;
    int kw = 1;
    int stride = 1;
    int dilation = 1;
    int padding = 0;
    bool has_bias = false;

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw ConfigError("conv2d: channel counts must be >= 1");
        if (kh < 1 || kw < 1 || stride < 1 || dilation < 1)
            throw ConfigError("conv2d: kernel, stride and dilation must be >= 1");
        if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    }
};

inline int conv_out_extent(int in, int k, int stride, int dilation, int padding) {
    int span = dilation * (k - 1) + 1;
    int num = in + 2 * padding - span;
    if (num < 0) return 0;
    return num / stride + 1;
}

namespace detail {

// col is K x L column-major, K = C*kh*kw, L = oh*ow.
template <class S>
void im2col(const S* x, int C, int H, int W, const ConvSpec& sp, int oh, int ow, S* col) {
    const int K = C * sp.kh * sp.kw;
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            S* dst = col + static_cast<std::int64_t>(oy * ow + ox) * K;
            const int iy0 = oy * sp.stride - sp.padding;
            const int ix0 = ox * sp.stride - sp.padding;
            int k = 0;
            for (int c = 0; c < C; ++c) {
                const S* plane = x + static_cast<std::int64_t>(c) * H * W;
                for (int ky = 0; ky < sp.kh; ++ky) {
                    const int iy = iy0 + ky * sp.dilation;
                    for (int kx = 0; kx < sp.kw; ++kx, ++k) {
                        const int ix = ix0 + kx * sp.dilation;
                        dst[k] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                     ? plane[iy * W + ix]
                                     : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, const ConvSpec& sp, int oh, int ow, S* dx) {
    const int K = C * sp.kh * sp.kw;
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const S* src = col + static_cast<std::int64_t>(oy * ow + ox) * K;
            const int iy0 = oy * sp.stride - sp.padding;
            const int ix0 = ox * sp.stride - sp.padding;
            int k = 0;
            for (int c = 0; c < C; ++c) {
                S* plane = dx + static_cast<std::int64_t>(c) * H * W;
                for (int ky = 0; ky < sp.kh; ++ky) {
                    const int iy = iy0 + ky * sp.dilation;
                    for (int kx = 0; kx < sp.kw; ++kx, ++k) {
                        const int ix = ix0 + kx * sp.dilation;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W) plane[iy * W + ix] += src[k];
                    }
                }
            }
        }
    }
}

inline bool is_pointwise(const ConvSpec& sp) {
    return sp.kh == 1 && sp.kw == 1 && sp.stride == 1 && sp.padding == 0;
}

}  // namespace detail

// weights shaped (out, in, kh, kw); bias, when present, (1, out, 1, 1).
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const ConvSpec& spec, const Tensor<S>& weight,
                 const Tensor<S>& bias = Tensor<S>()) {
    spec.validate();
    const Shape4 xs = x.shape();
    if (xs.c != spec.in_channels)
        throw ConfigError("conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                          std::to_string(spec.in_channels));
    const Shape4 ws = weight.shape();
    if (ws.n != spec.out_channels || ws.c != spec.in_channels || ws.h != spec.kh || ws.w != spec.kw)
        throw ConfigError("conv2d: weight shape " + ws.str() + " does not match spec");
    if (spec.has_bias) {
        if (!bias.defined() || bias.shape() != Shape4{1, spec.out_channels, 1, 1})
            throw ConfigError("conv2d: bias must be (1,out,1,1)");
    }
    const int oh = conv_out_extent(xs.h, spec.kh, spec.stride, spec.dilation, spec.padding);
    const int ow = conv_out_extent(xs.w, spec.kw, spec.stride, spec.dilation, spec.padding);
    if (oh < 1 || ow < 1)
        throw ConfigError("conv2d: kernel does not fit input " + xs.str());

    const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
    const int OC = spec.out_channels;
    const std::int64_t L = static_cast<std::int64_t>(oh) * ow;
    const std::int64_t K = static_cast<std::int64_t>(C) * spec.kh * spec.kw;
    const std::int64_t in_plane = static_cast<std::int64_t>(C) * H * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(OC) * L;

    std::vector<S> out(static_cast<std::size_t>(N) * out_plane);
    Eigen::Map<const MatRM<S>> Wm(weight.data(), OC, K);
    const bool pointwise = detail::is_pointwise(spec);

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        Eigen::Map<MatRM<S>> Ym(out.data() + n * out_plane, OC, L);
        if (pointwise) {
            Eigen::Map<const MatRM<S>> Xm(x.data() + n * in_plane, C, L);
            Ym.noalias() = Wm * Xm;
        } else {
            std::vector<S> col(static_cast<std::size_t>(K) * L);
            detail::im2col(x.data() + n * in_plane, C, H, W, spec, oh, ow, col.data());
            Eigen::Map<const MatCM<S>> Cm(col.data(), K, L);
            Ym.noalias() = Wm * Cm;
        }
        if (spec.has_bias) {
            for (int oc = 0; oc < OC; ++oc)
                Ym.row(oc).array() += bias.data()[oc];
        }
    }

    ConvSpec sp = spec;
    auto bw = [x, weight, bias, sp, oh, ow](detail::TensorNode<S>& node) {
        const Shape4 xs2 = x.shape();
        const int N2 = xs2.n, C2 = xs2.c, H2 = xs2.h, W2 = xs2.w;
        const int OC2 = sp.out_channels;
        const std::int64_t L2 = static_cast<std::int64_t>(oh) * ow;
        const std::int64_t K2 = static_cast<std::int64_t>(C2) * sp.kh * sp.kw;
        const std::int64_t in_plane2 = static_cast<std::int64_t>(C2) * H2 * W2;
        const std::int64_t out_plane2 = static_cast<std::int64_t>(OC2) * L2;
        const S* g = node.grad.data();
        Eigen::Map<const MatRM<S>> Wm2(weight.data(), OC2, K2);
        const bool pw = detail::is_pointwise(sp);

        const bool need_dx = x.needs_grad();
        const bool need_dw = weight.needs_grad();
        if (need_dx) x.node()->ensure_grad();
        std::vector<S> dw_partial;
        if (need_dw) dw_partial.assign(static_cast<std::size_t>(N2) * OC2 * K2, S(0));

#pragma omp parallel for schedule(static)
        for (int n = 0; n < N2; ++n) {
            Eigen::Map<const MatRM<S>> Gm(g + n * out_plane2, OC2, L2);
            std::vector<S> col;
            if (!pw && (need_dw || need_dx)) {
                col.resize(static_cast<std::size_t>(K2) * L2);
                detail::im2col(x.data() + n * in_plane2, C2, H2, W2, sp, oh, ow, col.data());
            }
            if (need_dw) {
                Eigen::Map<MatRM<S>> dWm(dw_partial.data() + n * OC2 * K2, OC2, K2);
                if (pw) {
                    Eigen::Map<const MatRM<S>> Xm(x.data() + n * in_plane2, C2, L2);
                    dWm.noalias() = Gm * Xm.transpose();
                } else {
                    Eigen::Map<const MatCM<S>> Cm(col.data(), K2, L2);
                    dWm.noalias() = Gm * Cm.transpose();
                }
            }
            if (need_dx) {
                S* dxp = x.node()->grad.data() + n * in_plane2;
                if (pw) {
                    Eigen::Map<MatRM<S>> dXm(dxp, C2, L2);
                    dXm.noalias() += Wm2.transpose() * Gm;
                } else {
                    std::vector<S> dcol(static_cast<std::size_t>(K2) * L2);
                    Eigen::Map<MatCM<S>> dCm(dcol.data(), K2, L2);
                    dCm.noalias() = Wm2.transpose() * Gm;
                    detail::col2im_add(dcol.data(), C2, H2, W2, sp, oh, ow, dxp);
                }
            }
        }
        if (need_dw) {
            auto& wg = weight.node()->ensure_grad();
            const std::int64_t wcount = static_cast<std::int64_t>(OC2) * K2;
            for (int n = 0; n < N2; ++n) {
                const S* part = dw_partial.data() + n * wcount;
                for (std::int64_t i = 0; i < wcount; ++i) wg[i] += part[i];
            }
        }
        if (sp.has_bias && bias.defined() && bias.needs_grad()) {
            auto& bg = bias.node()->ensure_grad();
            for (int n = 0; n < N2; ++n)
                for (int oc = 0; oc < OC2; ++oc) {
                    S acc = S(0);
                    const S* row = g + n * out_plane2 + oc * L2;
                    for (std::int64_t l = 0; l < L2; ++l) acc += row[l];
                    bg[oc] += acc;
                }
        }
    };

    std::vector<Tensor<S>> inputs{x, weight};
    if (spec.has_bias) inputs.push_back(bias);
    return detail::finite_result<S>("conv2d", {N, OC, oh, ow}, std::move(out), std::move(inputs),
                                    std::move(bw));
}

// ---------------------------------------------------------------------------
// batch normalization

enum class BnMode { train, infer };

// scale/shift are (1,C,1,1) parameters; running stats are plain tensors
// mutated in train mode (momentum keeps that fraction of the old value).
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                     Tensor<S>& running_mean, Tensor<S>& running_var, BnMode mode,
                     S momentum = S(0.9), S eps = S(1e-5)) {
    const Shape4 xs = x.shape();
    const int C = xs.c;
    const Shape4 param_shape{1, C, 1, 1};
    if (scale.shape() != param_shape || shift.shape() != param_shape ||
        running_mean.shape() != param_shape || running_var.shape() != param_shape)
        throw ConfigError("batch_norm: scale/shift/running stats must be (1,C,1,1)");
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    const std::int64_t per_channel = static_cast<std::int64_t>(xs.n) * plane;
    if (per_channel == 0 || xs.n == 0) throw ConfigError("batch_norm: zero-size batch");

    std::vector<S> mean(C), inv_std(C);
    if (mode == BnMode::train) {
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            double m = sum / static_cast<double>(per_channel);
            double var = sq / static_cast<double>(per_channel) - m * m;
            if (var < 0) var = 0;
            mean[c] = static_cast<S>(m);
            inv_std[c] = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            running_mean.data()[c] =
                momentum * running_mean.data()[c] + (S(1) - momentum) * static_cast<S>(m);
            running_var.data()[c] =
                momentum * running_var.data()[c] + (S(1) - momentum) * static_cast<S>(var);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running_mean.data()[c];
            inv_std[c] = S(1) / std::sqrt(running_var.data()[c] + eps);
        }
    }

    std::vector<S> out(x.values().size());
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < C; ++c) {
            const S* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            S* o = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            const S a = scale.data()[c] * inv_std[c];
            const S b = shift.data()[c] - a * mean[c];
            for (std::int64_t i = 0; i < plane; ++i) o[i] = a * p[i] + b;
        }

    auto bw = [x, scale, shift, mean, inv_std, mode, xs, plane,
               per_channel](detail::TensorNode<S>& node) {
        const S* g = node.grad.data();
        const int C2 = xs.c;
        const bool need_dx = x.needs_grad();
        if (need_dx) x.node()->ensure_grad();
        const bool need_dscale = scale.needs_grad();
        const bool need_dshift = shift.needs_grad();
        if (need_dscale) scale.node()->ensure_grad();
        if (need_dshift) shift.node()->ensure_grad();
        for (int c = 0; c < C2; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C2 + c) * plane;
                const S* gp = g + off;
                const S* xp = x.data() + off;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double xhat = (xp[i] - mean[c]) * inv_std[c];
                    sum_g += gp[i];
                    sum_gx += gp[i] * xhat;
                }
            }
            if (need_dshift) shift.node()->grad[c] += static_cast<S>(sum_g);
            if (need_dscale) scale.node()->grad[c] += static_cast<S>(sum_gx);
            if (!need_dx) continue;
            const S a = scale.data()[c] * inv_std[c];
            if (mode == BnMode::infer) {
                for (int n = 0; n < xs.n; ++n) {
                    const std::int64_t off = (static_cast<std::int64_t>(n) * C2 + c) * plane;
                    S* dxp = x.node()->grad.data() + off;
                    const S* gp = g + off;
                    for (std::int64_t i = 0; i < plane; ++i) dxp[i] += a * gp[i];
                }
            } else {
                const S mg = static_cast<S>(sum_g / static_cast<double>(per_channel));
                const S mgx = static_cast<S>(sum_gx / static_cast<double>(per_channel));
                for (int n = 0; n < xs.n; ++n) {
                    const std::int64_t off = (static_cast<std::int64_t>(n) * C2 + c) * plane;
                    S* dxp = x.node()->grad.data() + off;
                    const S* gp = g + off;
                    const S* xp = x.data() + off;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const S xhat = (xp[i] - mean[c]) * inv_std[c];
                        dxp[i] += a * (gp[i] - mg - xhat * mgx);
                    }
                }
            }
        }
    };

    return detail::finite_result<S>("batch_norm", xs, std::move(out), {x, scale, shift},
                                    std::move(bw));
}

// ---------------------------------------------------------------------------
// activations

enum class Act { tanh, leaky_relu, sigmoid, softmax_channels };

inline const char* act_name(Act a) {
    switch (a) {
        case Act::tanh: return "tanh";
        case Act::leaky_relu: return "leaky_relu";
        case Act::sigmoid: return "sigmoid";
        default: return "softmax_channels";
    }
}

constexpr double kLeakySlope = 0.1;

template <class S>
Tensor<S> activation(const Tensor<S>& x, Act kind) {
    const Shape4 xs = x.shape();
    if (kind == Act::softmax_channels && xs.c < 2)
        throw ConfigError("softmax_channels: needs at least 2 channels");
    std::vector<S> out(x.values().size());
    const S* p = x.data();
    const std::int64_t count = x.numel();
    switch (kind) {
        case Act::tanh:
            for (std::int64_t i = 0; i < count; ++i) out[i] = std::tanh(p[i]);
            break;
        case Act::sigmoid:
            for (std::int64_t i = 0; i < count; ++i) out[i] = S(1) / (S(1) + std::exp(-p[i]));
            break;
        case Act::leaky_relu:
            for (std::int64_t i = 0; i < count; ++i)
                out[i] = p[i] > S(0) ? p[i] : static_cast<S>(kLeakySlope) * p[i];
            break;
        case Act::softmax_channels: {
            const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
            for (int n = 0; n < xs.n; ++n) {
                const std::int64_t base = static_cast<std::int64_t>(n) * xs.c * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    S mx = p[base + i];
                    for (int c = 1; c < xs.c; ++c)
                        mx = std::max(mx, p[base + c * plane + i]);
                    S denom = S(0);
                    for (int c = 0; c < xs.c; ++c) {
                        const S e = std::exp(p[base + c * plane + i] - mx);
                        out[base + c * plane + i] = e;
                        denom += e;
                    }
                    for (int c = 0; c < xs.c; ++c) out[base + c * plane + i] /= denom;
                }
            }
            break;
        }
    }

    auto bw = [x, kind, xs](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        const S* g = node.grad.data();
        const S* y = node.values.data();
        const S* p = x.data();
        const std::int64_t count = static_cast<std::int64_t>(node.values.size());
        switch (kind) {
            case Act::tanh:
                for (std::int64_t i = 0; i < count; ++i) dx[i] += g[i] * (S(1) - y[i] * y[i]);
                break;
            case Act::sigmoid:
                for (std::int64_t i = 0; i < count; ++i) dx[i] += g[i] * y[i] * (S(1) - y[i]);
                break;
            case Act::leaky_relu:
                for (std::int64_t i = 0; i < count; ++i)
                    dx[i] += g[i] * (p[i] > S(0) ? S(1) : static_cast<S>(kLeakySlope));
                break;
            case Act::softmax_channels: {
                const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
                for (int n = 0; n < xs.n; ++n) {
                    const std::int64_t base = static_cast<std::int64_t>(n) * xs.c * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        S dot = S(0);
                        for (int c = 0; c < xs.c; ++c)
                            dot += g[base + c * plane + i] * y[base + c * plane + i];
                        for (int c = 0; c < xs.c; ++c) {
                            const std::int64_t j = base + c * plane + i;
                            dx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
                break;
            }
        }
    };

    return detail::finite_result<S>(act_name(kind), xs, std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// spatial resampling

template <class S>
Tensor<S> upsample_nearest(const Tensor<S>& x, int factor) {
    if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
    const Shape4 xs = x.shape();
    const Shape4 os{xs.n, xs.c, xs.h * factor, xs.w * factor};
    std::vector<S> out(static_cast<std::size_t>(os.numel()));
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    for (std::int64_t pc = 0; pc < planes; ++pc) {
        const S* src = x.data() + pc * xs.h * xs.w;
        S* dst = out.data() + pc * os.h * os.w;
        for (int y = 0; y < os.h; ++y) {
            const S* row = src + (y / factor) * xs.w;
            for (int xcol = 0; xcol < os.w; ++xcol) dst[y * os.w + xcol] = row[xcol / factor];
        }
    }
    auto bw = [x, factor, xs, os](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        const S* g = node.grad.data();
        const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
        for (std::int64_t pc = 0; pc < planes; ++pc) {
            S* d = dx.data() + pc * xs.h * xs.w;
            const S* gp = g + pc * os.h * os.w;
            for (int y = 0; y < os.h; ++y)
                for (int xcol = 0; xcol < os.w; ++xcol)
                    d[(y / factor) * xs.w + xcol / factor] += gp[y * os.w + xcol];
        }
    };
    return detail::finite_result<S>("upsample_nearest", os, std::move(out), {x}, std::move(bw));
}

// Non-overlapping factor x factor mean; inverse of upsample_nearest.
template <class S>
Tensor<S> avg_pool(const Tensor<S>& x, int factor) {
    if (factor < 1) throw ConfigError("avg_pool: factor must be >= 1");
    const Shape4 xs = x.shape();
    if (xs.h % factor != 0 || xs.w % factor != 0)
        throw ConfigError("avg_pool: spatial size not divisible by factor");
    const Shape4 os{xs.n, xs.c, xs.h / factor, xs.w / factor};
    std::vector<S> out(static_cast<std::size_t>(os.numel()));
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    // double accumulation keeps pool(upsample(x)) == x bit-exact
    for (std::int64_t pc = 0; pc < planes; ++pc) {
        const S* src = x.data() + pc * xs.h * xs.w;
        S* dst = out.data() + pc * os.h * os.w;
        for (int y = 0; y < os.h; ++y)
            for (int xcol = 0; xcol < os.w; ++xcol) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dxp = 0; dxp < factor; ++dxp)
                        acc += src[(y * factor + dy) * xs.w + xcol * factor + dxp];
                dst[y * os.w + xcol] = static_cast<S>(acc / (factor * factor));
            }
    }
    auto bw = [x, factor, xs, os](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        const S* g = node.grad.data();
        const S inv = S(1) / static_cast<S>(factor * factor);
        const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
        for (std::int64_t pc = 0; pc < planes; ++pc) {
            S* d = dx.data() + pc * xs.h * xs.w;
            const S* gp = g + pc * os.h * os.w;
            for (int y = 0; y < xs.h; ++y)
                for (int xcol = 0; xcol < xs.w; ++xcol)
                    d[y * xs.w + xcol] += gp[(y / factor) * os.w + xcol / factor] * inv;
        }
    };
    return detail::finite_result<S>("avg_pool", os, std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// channel gate: y[n,c,h,w] = x[n,c,h,w] * tanh(gate[c])

template <class S>
Tensor<S> channel_gate(const Tensor<S>& x, const Tensor<S>& gate_params) {
    const Shape4 xs = x.shape();
    if (gate_params.shape() != Shape4{1, xs.c, 1, 1})
        throw ConfigError("channel_gate: gate_params must be (1,C,1,1) with C = input channels");
    std::vector<S> gate(xs.c);
    for (int c = 0; c < xs.c; ++c) gate[c] = std::tanh(gate_params.data()[c]);
    std::vector<S> out(x.values().size());
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) out[off + i] = x.data()[off + i] * gate[c];
        }
    auto bw = [x, gate_params, gate, xs, plane](detail::TensorNode<S>& node) {
        const S* g = node.grad.data();
        const bool need_dx = x.needs_grad();
        const bool need_dg = gate_params.needs_grad();
        if (need_dx) x.node()->ensure_grad();
        if (need_dg) gate_params.node()->ensure_grad();
        for (int c = 0; c < xs.c; ++c) {
            double acc = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
                const S* gp = g + off;
                const S* xp = x.data() + off;
                if (need_dx) {
                    S* dxp = x.node()->grad.data() + off;
                    for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gp[i] * gate[c];
                }
                if (need_dg)
                    for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(gp[i]) * xp[i];
            }
            if (need_dg)
                gate_params.node()->grad[c] +=
                    static_cast<S>(acc) * (S(1) - gate[c] * gate[c]);
        }
    };
    return detail::finite_result<S>("channel_gate", xs, std::move(out), {x, gate_params},
                                    std::move(bw));
}

// ---------------------------------------------------------------------------
// merge

enum class MergeMode { add, concat_channels };

template <class S>
Tensor<S> merge(const std::vector<Tensor<S>>& inputs, MergeMode mode) {
    if (inputs.empty()) throw ConfigError("merge: needs at least one input");
    const Shape4 first = inputs[0].shape();
    if (mode == MergeMode::add) {
        for (const auto& t : inputs)
            if (t.shape() != first)
                throw ConfigError("merge(add): shape mismatch " + t.shape().str() + " vs " +
                                  first.str());
        std::vector<S> out(inputs[0].values());
        for (std::size_t k = 1; k < inputs.size(); ++k) {
            const S* p = inputs[k].data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
        }
        auto bw = [inputs](detail::TensorNode<S>& node) {
            for (const auto& t : inputs)
                if (t.needs_grad()) t.node()->accumulate(node.grad.data(), node.grad.size());
        };
        return detail::finite_result<S>("merge_add", first, std::move(out), inputs, std::move(bw));
    }

    int total_c = 0;
    for (const auto& t : inputs) {
        const Shape4 s = t.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w)
            throw ConfigError("merge(concat): (n,h,w) mismatch " + s.str() + " vs " + first.str());
        total_c += s.c;
    }
    const Shape4 os{first.n, total_c, first.h, first.w};
    const std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
    std::vector<S> out(static_cast<std::size_t>(os.numel()));
    for (int n = 0; n < os.n; ++n) {
        std::int64_t coff = 0;
        for (const auto& t : inputs) {
            const int tc = t.shape().c;
            std::memcpy(out.data() + (static_cast<std::int64_t>(n) * total_c + coff) * plane,
                        t.data() + static_cast<std::int64_t>(n) * tc * plane,
                        sizeof(S) * static_cast<std::size_t>(tc) * plane);
            coff += tc;
        }
    }
    auto bw = [inputs, total_c, plane](detail::TensorNode<S>& node) {
        const Shape4 os2 = node.shape;
        for (int n = 0; n < os2.n; ++n) {
            std::int64_t coff = 0;
            for (const auto& t : inputs) {
                const int tc = t.shape().c;
                if (t.needs_grad()) {
                    auto& dx = t.node()->ensure_grad();
                    const S* g =
                        node.grad.data() + (static_cast<std::int64_t>(n) * total_c + coff) * plane;
                    S* d = dx.data() + static_cast<std::int64_t>(n) * tc * plane;
                    for (std::int64_t i = 0; i < tc * plane; ++i) d[i] += g[i];
                }
                coff += tc;
            }
        }
    };
    return detail::finite_result<S>("merge_concat", os, std::move(out), inputs, std::move(bw));
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return merge<S>({a, b}, MergeMode::add);
}

// ---------------------------------------------------------------------------
// cell gathering (one feature vector per selected grid cell)

struct CellIndex {
    int n = 0;
    int y = 0;
    int x = 0;
};

template <class S>
Tensor<S> gather_cells(const Tensor<S>& x, const std::vector<CellIndex>& cells) {
    const Shape4 xs = x.shape();
    if (cells.empty()) throw ConfigError("gather_cells: empty cell list");
    for (const auto& c : cells)
        if (c.n < 0 || c.n >= xs.n || c.y < 0 || c.y >= xs.h || c.x < 0 || c.x >= xs.w)
            throw ConfigError("gather_cells: cell index out of range");
    const int P = static_cast<int>(cells.size());
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    std::vector<S> out(static_cast<std::size_t>(P) * xs.c);
    for (int p = 0; p < P; ++p)
        for (int c = 0; c < xs.c; ++c)
            out[static_cast<std::int64_t>(p) * xs.c + c] =
                x.data()[(static_cast<std::int64_t>(cells[p].n) * xs.c + c) * plane +
                         cells[p].y * xs.w + cells[p].x];
    auto bw = [x, cells, xs, plane](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        for (std::size_t p = 0; p < cells.size(); ++p)
            for (int c = 0; c < xs.c; ++c)
                dx[(static_cast<std::int64_t>(cells[p].n) * xs.c + c) * plane +
                   cells[p].y * xs.w + cells[p].x] +=
                    node.grad[p * static_cast<std::size_t>(xs.c) + c];
    };
    return detail::finite_result<S>("gather_cells", {P, xs.c, 1, 1}, std::move(out), {x},
                                    std::move(bw));
}

// ---------------------------------------------------------------------------
// reductions and scalar plumbing

// `offset` is subtracted inside the double-precision accumulation before the
// result is narrowed to S; finite-difference probes pass the unperturbed loss
// here so the difference survives 32-bit rounding of the scalar.
template <class S>
Tensor<S> sum_all(const Tensor<S>& x, double offset = 0.0) {
    double acc = -offset;
    for (const S v : x.values()) acc += v;
    auto bw = [x](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        const S g = node.grad[0];
        for (auto& d : dx) d += g;
    };
    return detail::finite_result<S>("sum", {1, 1, 1, 1}, {static_cast<S>(acc)}, {x},
                                    std::move(bw));
}

// Fixed-coefficient contraction; the workhorse loss for gradient checks.
template <class S>
Tensor<S> weighted_sum(const Tensor<S>& x, std::vector<S> weights) {
    if (static_cast<std::int64_t>(weights.size()) != x.numel())
        throw ConfigError("weighted_sum: weight count mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) acc += double(weights[i]) * x.data()[i];
    auto bw = [x, weights](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        const S g = node.grad[0];
        for (std::size_t i = 0; i < weights.size(); ++i) dx[i] += g * weights[i];
    };
    return detail::finite_result<S>("weighted_sum", {1, 1, 1, 1}, {static_cast<S>(acc)}, {x},
                                    std::move(bw));
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
    std::vector<S> out(x.values());
    for (auto& v : out) v *= factor;
    auto bw = [x, factor](detail::TensorNode<S>& node) {
        if (!x.needs_grad()) return;
        auto& dx = x.node()->ensure_grad();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += node.grad[i] * factor;
    };
    return detail::finite_result<S>("scale", x.shape(), std::move(out), {x}, std::move(bw));
}

}  // namespace dasnet
