#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fixnoise/parallel.hpp"
#include "fixnoise/tensor.hpp"

// Every backward rule below is written in terms of the public ops, so when a
// backward pass runs with recording enabled (create_graph) the gradient is
// itself differentiable. Linear ops are expressed through `linear_map`, whose
// backward applies the adjoint kernel and whose adjoint's backward applies
// the forward kernel again.

namespace fixnoise {

using Kernel = std::function<void(std::span<const double> in, std::span<double> out)>;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

/// Splits an [N x C x ...] shape into (N, C, prod(rest)).
struct NCS {
    std::size_t n, c, s;
};

inline NCS split_ncs(const Shape& shape, const char* op) {
    if (shape.size() < 2) throw DimensionError(std::string(op) + ": need at least [N x C], got " + shape_str(shape));
    std::size_t s = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) s *= shape[i];
    return {shape[0], shape[1], s};
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace detail

inline Tensor linear_map(const Tensor& x, Shape out_shape, Kernel forward, Kernel adjoint, const char* op) {
    std::vector<double> out(shape_numel(out_shape), 0.0);
    forward(x.data(), out);
    Shape in_shape = x.shape();
    return make_result(
        std::move(out_shape), std::move(out), {x},
        [in_shape, forward, adjoint, op](const Tensor& g) -> std::vector<Tensor> {
            return {linear_map(g, in_shape, adjoint, forward, op)};
        },
        op);
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](const Tensor& g) -> std::vector<Tensor> { return {g, g}; }, "add");
}

inline Tensor scale(const Tensor& a, double c) {
    auto k = [c](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * c;
    };
    return linear_map(a, a.shape(), k, k, "scale");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](const Tensor& g) -> std::vector<Tensor> { return {g, scale(g, -1.0)}; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(
        a.shape(), std::move(out), {a, b},
        [a, b](const Tensor& g) -> std::vector<Tensor> {
            return {a.requires_grad() ? mul(g, b) : Tensor{}, b.requires_grad() ? mul(g, a) : Tensor{}};
        },
        "mul");
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += c;
    return make_result(a.shape(), std::move(out), {a},
                       [](const Tensor& g) -> std::vector<Tensor> { return {g}; }, "add_scalar");
}

/// leaky_relu(x) = x for x >= 0, slope * x otherwise. The backward rule
/// multiplies by a constant mask built from the forward sign.
inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    std::vector<double> mask(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        mask[i] = in[i] >= 0.0 ? 1.0 : slope;
        out[i] = in[i] * mask[i];
    }
    Tensor m = Tensor::from_data(x.shape(), std::move(mask));
    return make_result(x.shape(), std::move(out), {x},
                       [m](const Tensor& g) -> std::vector<Tensor> { return {mul(g, m)}; }, "leaky_relu");
}

inline Tensor rsqrt(const Tensor& x) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) throw DegenerateInputError("rsqrt of non-positive value " + std::to_string(in[i]));
        out[i] = 1.0 / std::sqrt(in[i]);
    }
    return make_result(
        x.shape(), std::move(out), {x},
        [x](const Tensor& g) -> std::vector<Tensor> {
            const Tensor r = rsqrt(x);
            return {mul(g, scale(mul(r, mul(r, r)), -0.5))};
        },
        "rsqrt");
}

inline Tensor sigmoid(const Tensor& x) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-in[i])) : std::exp(in[i]) / (1.0 + std::exp(in[i]));
    }
    return make_result(
        x.shape(), std::move(out), {x},
        [x](const Tensor& g) -> std::vector<Tensor> {
            const Tensor s = sigmoid(x);
            return {mul(g, mul(s, add_scalar(scale(s, -1.0), 1.0)))};
        },
        "sigmoid");
}

/// log(1 + exp(x)), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(in[i], 0.0) + std::log1p(std::exp(-std::abs(in[i])));
    return make_result(x.shape(), std::move(out), {x},
                       [x](const Tensor& g) -> std::vector<Tensor> { return {mul(g, sigmoid(x))}; }, "softplus");
}

// ---------------------------------------------------------------------------
// Shape and reductions

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto k = [](std::span<const double> in, std::span<double> out) { std::copy(in.begin(), in.end(), out.begin()); };
    return linear_map(a, std::move(shape), k, k, "reshape");
}

inline Tensor sum(const Tensor& a) {
    const std::size_t n = a.numel();
    auto fwd = [](std::span<const double> in, std::span<double> out) {
        double s = 0.0;
        for (double v : in) s += v;
        out[0] = s;
    };
    auto adj = [n](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < n; ++i) out[i] = in[0];
    };
    return linear_map(a, {}, fwd, adj, "sum");
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Broadcast a one-element tensor to `shape`.
inline Tensor expand(const Tensor& s, Shape shape) {
    if (s.numel() != 1) throw DimensionError("expand: source must have one element, got " + shape_str(s.shape()));
    auto fwd = [](std::span<const double> in, std::span<double> out) { std::fill(out.begin(), out.end(), in[0]); };
    auto adj = [](std::span<const double> in, std::span<double> out) {
        double acc = 0.0;
        for (double v : in) acc += v;
        out[0] = acc;
    };
    return linear_map(s, std::move(shape), fwd, adj, "expand");
}

/// x * s for a one-element tensor s.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
    const double c = s.data()[0];
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= c;
    return make_result(
        x.shape(), std::move(out), {x, s},
        [x, s](const Tensor& g) -> std::vector<Tensor> {
            return {x.requires_grad() ? scale_by(g, s) : Tensor{},
                    s.requires_grad() ? reshape(sum(mul(g, x)), s.shape()) : Tensor{}};
        },
        "scale_by");
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    auto fwd = [m, n](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    };
    auto adj = [m, n](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[j * m + i];
    };
    return linear_map(a, {n, m}, fwd, adj, "transpose");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::MutMap(out.data(), m, n).noalias() = detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
    return make_result(
        {m, n}, std::move(out), {a, b},
        [a, b](const Tensor& g) -> std::vector<Tensor> {
            return {a.requires_grad() ? matmul(g, transpose(b)) : Tensor{},
                    b.requires_grad() ? matmul(transpose(a), g) : Tensor{}};
        },
        "matmul");
}

// ---------------------------------------------------------------------------
// Channel-structured broadcasts on [N x C x ...] tensors

/// [N x C x S...] -> [C], summing over batch and space.
inline Tensor sum_to_channels(const Tensor& x) {
    const auto d = detail::split_ncs(x.shape(), "sum_to_channels");
    auto fwd = [d](std::span<const double> in, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* p = in.data() + (n * d.c + c) * d.s;
                double acc = 0.0;
                for (std::size_t i = 0; i < d.s; ++i) acc += p[i];
                out[c] += acc;
            }
    };
    auto adj = [d](std::span<const double> in, std::span<double> out) {
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < d.c; ++c) std::fill_n(out.data() + (n * d.c + c) * d.s, d.s, in[c]);
    };
    return linear_map(x, {d.c}, fwd, adj, "sum_to_channels");
}

/// x + b with b of shape [C] broadcast over batch and space.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    const auto d = detail::split_ncs(x.shape(), "add_bias");
    if (b.numel() != d.c) {
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match channels of " + shape_str(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto bias = b.data();
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c) {
            double* p = out.data() + (n * d.c + c) * d.s;
            for (std::size_t i = 0; i < d.s; ++i) p[i] += bias[c];
        }
    return make_result(
        x.shape(), std::move(out), {x, b},
        [b](const Tensor& g) -> std::vector<Tensor> {
            return {g, b.requires_grad() ? reshape(sum_to_channels(g), b.shape()) : Tensor{}};
        },
        "add_bias");
}

/// [N x C x S...] -> [N x C], summing over space.
inline Tensor sum_spatial(const Tensor& x) {
    const auto d = detail::split_ncs(x.shape(), "sum_spatial");
    auto fwd = [d](std::span<const double> in, std::span<double> out) {
        for (std::size_t r = 0; r < d.n * d.c; ++r) {
            const double* p = in.data() + r * d.s;
            double acc = 0.0;
            for (std::size_t i = 0; i < d.s; ++i) acc += p[i];
            out[r] = acc;
        }
    };
    auto adj = [d](std::span<const double> in, std::span<double> out) {
        for (std::size_t r = 0; r < d.n * d.c; ++r) std::fill_n(out.data() + r * d.s, d.s, in[r]);
    };
    return linear_map(x, {d.n, d.c}, fwd, adj, "sum_spatial");
}

/// x[n, c, ...] * s[n, c]: per-sample per-channel scaling.
inline Tensor mul_channel(const Tensor& x, const Tensor& s) {
    const auto d = detail::split_ncs(x.shape(), "mul_channel");
    if (s.rank() != 2 || s.dim(0) != d.n || s.dim(1) != d.c) {
        throw DimensionError("mul_channel: scale " + shape_str(s.shape()) + " does not match " + shape_str(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto f = s.data();
    for (std::size_t r = 0; r < d.n * d.c; ++r) {
        double* p = out.data() + r * d.s;
        for (std::size_t i = 0; i < d.s; ++i) p[i] *= f[r];
    }
    return make_result(
        x.shape(), std::move(out), {x, s},
        [x, s](const Tensor& g) -> std::vector<Tensor> {
            return {x.requires_grad() ? mul_channel(g, s) : Tensor{},
                    s.requires_grad() ? sum_spatial(mul(g, x)) : Tensor{}};
        },
        "mul_channel");
}

/// [N x 1 x S...] -> [N x C x S...] by repetition over channels.
inline Tensor broadcast_channels(const Tensor& x, std::size_t channels) {
    const auto d = detail::split_ncs(x.shape(), "broadcast_channels");
    if (d.c != 1) throw DimensionError("broadcast_channels: expected one channel, got " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[1] = channels;
    auto fwd = [d, channels](std::span<const double> in, std::span<double> out) {
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < channels; ++c)
                std::copy_n(in.data() + n * d.s, d.s, out.data() + (n * channels + c) * d.s);
    };
    auto adj = [d, channels](std::span<const double> in, std::span<double> out) {
        for (std::size_t n = 0; n < d.n; ++n) {
            double* o = out.data() + n * d.s;
            std::fill_n(o, d.s, 0.0);
            for (std::size_t c = 0; c < channels; ++c) {
                const double* p = in.data() + (n * channels + c) * d.s;
                for (std::size_t i = 0; i < d.s; ++i) o[i] += p[i];
            }
        }
    };
    return linear_map(x, std::move(out_shape), fwd, adj, "broadcast_channels");
}

/// [1 x ...] -> [N x ...] by repetition over the batch.
inline Tensor expand_batch(const Tensor& x, std::size_t batch) {
    if (x.rank() == 0 || x.dim(0) != 1) throw DimensionError("expand_batch: leading extent must be 1, got " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[0] = batch;
    const std::size_t per = x.numel();
    auto fwd = [per, batch](std::span<const double> in, std::span<double> out) {
        for (std::size_t n = 0; n < batch; ++n) std::copy_n(in.data(), per, out.data() + n * per);
    };
    auto adj = [per, batch](std::span<const double> in, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < per; ++i) out[i] += in[n * per + i];
    };
    return linear_map(x, std::move(out_shape), fwd, adj, "expand_batch");
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero "same" padding, odd kernels)

namespace kernels {

struct ConvDims {
    std::size_t n, c, h, w, o, kh, kw;
    std::size_t hw() const { return h * w; }
    std::size_t ckk() const { return c * kh * kw; }
};

inline void im2col(const double* x, double* col, const ConvDims& d) {
    const long ph = static_cast<long>(d.kh / 2), pw = static_cast<long>(d.kw / 2);
    const long H = static_cast<long>(d.h), W = static_cast<long>(d.w);
    for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t a = 0; a < d.kh; ++a)
            for (std::size_t b = 0; b < d.kw; ++b) {
                double* row = col + ((c * d.kh + a) * d.kw + b) * d.hw();
                const double* plane = x + c * d.hw();
                for (long y = 0; y < H; ++y) {
                    const long sy = y + static_cast<long>(a) - ph;
                    double* dst = row + y * W;
                    if (sy < 0 || sy >= H) {
                        std::fill_n(dst, W, 0.0);
                        continue;
                    }
                    for (long xx = 0; xx < W; ++xx) {
                        const long sx = xx + static_cast<long>(b) - pw;
                        dst[xx] = (sx < 0 || sx >= W) ? 0.0 : plane[sy * W + sx];
                    }
                }
            }
}

inline void conv2d_forward(const double* x, const double* w, double* y, const ConvDims& d) {
    const bool pointwise = d.kh == 1 && d.kw == 1;
    parallel_for(d.n, [&](std::size_t n) {
        std::vector<double> col;
        const double* cols = x + n * d.c * d.hw();
        if (!pointwise) {
            col.resize(d.ckk() * d.hw());
            im2col(cols, col.data(), d);
            cols = col.data();
        }
        detail::MutMap(y + n * d.o * d.hw(), d.o, d.hw()).noalias() =
            detail::ConstMap(w, d.o, d.ckk()) * detail::ConstMap(cols, d.ckk(), d.hw());
    });
}

/// dW = sum_n dY_n * col(x_n)^T with the per-sample partials reduced in
/// sample order regardless of thread count.
inline void conv2d_weight_grad(const double* x, const double* dy, double* dw, const ConvDims& d) {
    const bool pointwise = d.kh == 1 && d.kw == 1;
    const std::size_t wsize = d.o * d.ckk();
    std::vector<double> partial(d.n * wsize);
    parallel_for(d.n, [&](std::size_t n) {
        std::vector<double> col;
        const double* cols = x + n * d.c * d.hw();
        if (!pointwise) {
            col.resize(d.ckk() * d.hw());
            im2col(cols, col.data(), d);
            cols = col.data();
        }
        detail::MutMap(partial.data() + n * wsize, d.o, d.ckk()).noalias() =
            detail::ConstMap(dy + n * d.o * d.hw(), d.o, d.hw()) * detail::ConstMap(cols, d.ckk(), d.hw()).transpose();
    });
    std::fill_n(dw, wsize, 0.0);
    for (std::size_t n = 0; n < d.n; ++n) {
        const double* p = partial.data() + n * wsize;
        for (std::size_t i = 0; i < wsize; ++i) dw[i] += p[i];
    }
}

}  // namespace kernels

/// [O x C x kh x kw] -> [C x O x kh x kw] with both spatial axes reversed.
/// This is the weight that turns the convolution adjoint into another
/// stride-1 same-padded convolution. It is a permutation, so it is its own
/// adjoint up to the swapped leading axes.
inline Tensor flip_transpose(const Tensor& w) {
    detail::require_rank(w, 4, "flip_transpose");
    const std::size_t o = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    auto make = [](std::size_t o_, std::size_t c_, std::size_t kh_, std::size_t kw_) {
        return [=](std::span<const double> in, std::span<double> out) {
            for (std::size_t i = 0; i < o_; ++i)
                for (std::size_t j = 0; j < c_; ++j)
                    for (std::size_t a = 0; a < kh_; ++a)
                        for (std::size_t b = 0; b < kw_; ++b)
                            out[((j * o_ + i) * kh_ + (kh_ - 1 - a)) * kw_ + (kw_ - 1 - b)] =
                                in[((i * c_ + j) * kh_ + a) * kw_ + b];
        };
    };
    return linear_map(w, {c, o, kh, kw}, make(o, c, kh, kw), make(c, o, kh, kw), "flip_transpose");
}

inline Tensor conv2d_weight(const Tensor& x, const Tensor& dy, std::size_t kh, std::size_t kw);

/// Cross-correlation of [N x C x H x W] with [O x C x kh x kw], stride 1,
/// zero padding that preserves H x W.
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d");
    if (x.dim(1) != w.dim(1)) {
        throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " do not match weight " + shape_str(w.shape()));
    }
    if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) {
        throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
    }
    const kernels::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3)};
    std::vector<double> out(d.n * d.o * d.hw());
    kernels::conv2d_forward(x.data().data(), w.data().data(), out.data(), d);
    return make_result(
        {d.n, d.o, d.h, d.w}, std::move(out), {x, w},
        [x, w](const Tensor& g) -> std::vector<Tensor> {
            return {x.requires_grad() ? conv2d(g, flip_transpose(w)) : Tensor{},
                    w.requires_grad() ? conv2d_weight(x, g, w.dim(2), w.dim(3)) : Tensor{}};
        },
        "conv2d");
}

/// Weight gradient of conv2d as a bilinear op in (x, dy), so that it can be
/// differentiated again.
inline Tensor conv2d_weight(const Tensor& x, const Tensor& dy, std::size_t kh, std::size_t kw) {
    detail::require_rank(x, 4, "conv2d_weight");
    detail::require_rank(dy, 4, "conv2d_weight");
    const kernels::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), dy.dim(1), kh, kw};
    if (dy.dim(0) != d.n || dy.dim(2) != d.h || dy.dim(3) != d.w) {
        throw DimensionError("conv2d_weight: " + shape_str(x.shape()) + " vs " + shape_str(dy.shape()));
    }
    std::vector<double> out(d.o * d.ckk());
    kernels::conv2d_weight_grad(x.data().data(), dy.data().data(), out.data(), d);
    return make_result(
        {d.o, d.c, kh, kw}, std::move(out), {x, dy},
        [x, dy](const Tensor& g) -> std::vector<Tensor> {
            return {x.requires_grad() ? conv2d(dy, flip_transpose(g)) : Tensor{},
                    dy.requires_grad() ? conv2d(x, g) : Tensor{}};
        },
        "conv2d_weight");
}

// ---------------------------------------------------------------------------
// 2x resampling with the normalized [1,2,1] x [1,2,1] smoothing kernel and
// edge-replicating borders (so constant images stay constant).

namespace kernels {

// 1-D smoothing along a strided line, and its exact adjoint.
inline void smooth_line(const double* in, double* out, std::size_t n, std::size_t stride) {
    if (n == 1) {
        out[0] = in[0];
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double l = in[(i == 0 ? 0 : i - 1) * stride];
        const double r = in[(i + 1 == n ? n - 1 : i + 1) * stride];
        out[i * stride] = 0.25 * l + 0.5 * in[i * stride] + 0.25 * r;
    }
}

inline void smooth_line_adjoint(const double* in, double* out, std::size_t n, std::size_t stride) {
    if (n == 1) {
        out[0] = in[0];
        return;
    }
    for (std::size_t i = 0; i < n; ++i) out[i * stride] = 0.5 * in[i * stride];
    for (std::size_t i = 0; i < n; ++i) {
        out[(i == 0 ? 0 : i - 1) * stride] += 0.25 * in[i * stride];
        out[(i + 1 == n ? n - 1 : i + 1) * stride] += 0.25 * in[i * stride];
    }
}

inline void smooth_plane(const double* in, double* out, std::size_t h, std::size_t w, bool adjoint) {
    std::vector<double> tmp(h * w);
    auto line = adjoint ? smooth_line_adjoint : smooth_line;
    for (std::size_t y = 0; y < h; ++y) line(in + y * w, tmp.data() + y * w, w, 1);
    for (std::size_t x = 0; x < w; ++x) line(tmp.data() + x, out + x, h, w);
}

}  // namespace kernels

inline Tensor up2x(const Tensor& x) {
    detail::require_rank(x, 4, "up2x");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    auto fwd = [planes, h, w](std::span<const double> in, std::span<double> out) {
        std::vector<double> nn(4 * h * w);
        for (std::size_t p = 0; p < planes; ++p) {
            const double* src = in.data() + p * h * w;
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx) nn[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            kernels::smooth_plane(nn.data(), out.data() + p * 4 * h * w, 2 * h, 2 * w, false);
        }
    };
    auto adj = [planes, h, w](std::span<const double> in, std::span<double> out) {
        std::vector<double> tmp(4 * h * w);
        for (std::size_t p = 0; p < planes; ++p) {
            kernels::smooth_plane(in.data() + p * 4 * h * w, tmp.data(), 2 * h, 2 * w, true);
            double* dst = out.data() + p * h * w;
            std::fill_n(dst, h * w, 0.0);
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += tmp[y * 2 * w + xx];
        }
    };
    return linear_map(x, {x.dim(0), x.dim(1), 2 * h, 2 * w}, fwd, adj, "up2x");
}

inline Tensor down2x(const Tensor& x) {
    detail::require_rank(x, 4, "down2x");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw DimensionError("down2x: extents must be even, got " + shape_str(x.shape()));
    auto fwd = [planes, h, w](std::span<const double> in, std::span<double> out) {
        std::vector<double> tmp(h * w);
        for (std::size_t p = 0; p < planes; ++p) {
            kernels::smooth_plane(in.data() + p * h * w, tmp.data(), h, w, false);
            double* dst = out.data() + p * (h / 2) * (w / 2);
            for (std::size_t y = 0; y < h / 2; ++y)
                for (std::size_t xx = 0; xx < w / 2; ++xx) dst[y * (w / 2) + xx] = tmp[(2 * y) * w + 2 * xx];
        }
    };
    auto adj = [planes, h, w](std::span<const double> in, std::span<double> out) {
        std::vector<double> tmp(h * w);
        for (std::size_t p = 0; p < planes; ++p) {
            std::fill(tmp.begin(), tmp.end(), 0.0);
            const double* src = in.data() + p * (h / 2) * (w / 2);
            for (std::size_t y = 0; y < h / 2; ++y)
                for (std::size_t xx = 0; xx < w / 2; ++xx) tmp[(2 * y) * w + 2 * xx] = src[y * (w / 2) + xx];
            kernels::smooth_plane(tmp.data(), out.data() + p * h * w, h, w, true);
        }
    };
    return linear_map(x, {x.dim(0), x.dim(1), h / 2, w / 2}, fwd, adj, "down2x");
}

enum class Resample { up, down };

inline Tensor resample2x(const Tensor& x, Resample direction) {
    return direction == Resample::up ? up2x(x) : down2x(x);
}

// ---------------------------------------------------------------------------
// Helpers

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Mean of squared differences, the reduction used by all matching losses.
inline Tensor mean_squared_difference(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

}  // namespace fixnoise
