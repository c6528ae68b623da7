#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "panflow/autograd.hpp"
#include "panflow/tensor.hpp"

namespace panflow {

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_4d(const Shape& s, const char* what) {
    if (s.size() != 4) {
        throw ShapeError(std::string(what) + " expects an N x C x H x W tensor, got " + shape_str(s));
    }
}

template <class T>
using Buffer = typename Tensor<T>::Storage;

/// Copies a C x H x W image into a zero-bordered C x (H+2p) x (W+2p) buffer.
/// The buffer carries 2p trailing floats so every tap-shifted slice stays in bounds.
template <class T>
void pad_planes(const T* src, std::size_t channels, std::size_t height, std::size_t width, std::size_t pad,
                Buffer<T>& dst) {
    const std::size_t wp = width + 2 * pad;
    const std::size_t plane_p = (height + 2 * pad) * wp;
    dst.resize(channels * plane_p + 2 * pad);
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = dst.data() + c * plane_p;
        std::fill(plane, plane + pad * wp + pad, T{0});
        for (std::size_t y = 0; y < height; ++y) {
            const T* row = src + (c * height + y) * width;
            T* out = plane + (y + pad) * wp + pad;
            std::copy(row, row + width, out);
            std::fill(out + width, out + width + 2 * pad, T{0});
        }
        std::fill(plane + (height + pad) * wp + pad, plane + plane_p, T{0});
    }
    std::fill(dst.end() - static_cast<std::ptrdiff_t>(2 * pad), dst.end(), T{0});
}

struct ConvGeometry {
    std::size_t n, cin, cout, height, width, k;

    std::size_t pad() const { return k / 2; }
    std::size_t padded_width() const { return width + 2 * pad(); }
    std::size_t padded_plane() const { return (height + 2 * pad()) * padded_width(); }
    // Outputs are computed on rows of padded width; columns x >= width are discarded.
    std::size_t wide_plane() const { return height * padded_width(); }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& b) {
    require_4d(x, "conv2d input");
    if (w.size() != 4) throw ShapeError("conv2d weight must be Cout x Cin x k x k, got " + shape_str(w));
    if (w[2] != w[3] || w[2] % 2 == 0) {
        throw ShapeError("conv2d kernel must be square with odd size, got " + shape_str(w));
    }
    if (w[1] != x[1]) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + " has " +
                         std::to_string(x[1]) + " channels, weight " + shape_str(w) + " expects " +
                         std::to_string(w[1]));
    }
    if (b.size() != 1 || b[0] != w[0]) {
        throw ShapeError("conv2d bias must have " + std::to_string(w[0]) + " entries, got " +
                         shape_str(b));
    }
    return {x[0], x[1], w[0], x[2], x[3], w[2]};
}

// Columns of the wide output grid handled per GEMM; sized so the patch block stays in L2.
inline constexpr std::size_t kConvChunk = 1024;

/// Patch block for columns [j0, j0 + len) of the wide grid: row (c, ky, kx) holds the
/// slice of padded channel c shifted by (ky, kx).
template <class T>
void gather_patches(const T* padded, const ConvGeometry& g, std::size_t j0, std::size_t len, T* cols) {
    const std::size_t kk = g.k * g.k;
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* base = padded + c * g.padded_plane() + j0;
        for (std::size_t t = 0; t < kk; ++t) {
            const T* src = base + (t / g.k) * g.padded_width() + t % g.k;
            std::copy(src, src + len, cols + (c * kk + t) * len);
        }
    }
}

template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/// Direct convolution. Outputs live on a "wide" grid whose rows have padded width, so
/// each kernel tap is a contiguous shifted slice of the padded input; the grid is
/// processed in column blocks, each one patch gather plus one GEMM.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const auto g = conv_geometry(x.shape(), w.shape(), b.shape());
    const std::size_t plane = g.height * g.width;
    const std::size_t wp = g.padded_width();
    const std::size_t wide = g.wide_plane();
    const std::size_t patch = g.cin * g.k * g.k;
    const auto cout = static_cast<Eigen::Index>(g.cout);
    ConstMatMap<T> wm(w.data(), cout, static_cast<Eigen::Index>(patch));
    auto out = Tensor<T>::uninitialized(Shape{g.n, g.cout, g.height, g.width});
    Buffer<T> padded;
    Buffer<T> cols(patch * kConvChunk);
    RowMat<T> acc(cout, static_cast<Eigen::Index>(wide));
    for (std::size_t n = 0; n < g.n; ++n) {
        pad_planes(x.data() + n * g.cin * plane, g.cin, g.height, g.width, g.pad(), padded);
        for (std::size_t j0 = 0; j0 < wide; j0 += kConvChunk) {
            const std::size_t len = std::min(kConvChunk, wide - j0);
            const auto cols_n = static_cast<Eigen::Index>(len);
            gather_patches(padded.data(), g, j0, len, cols.data());
            StridedMap<T>(acc.data() + j0, cout, cols_n, Eigen::OuterStride<>(acc.cols())).noalias() =
                wm * ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(patch), cols_n);
        }
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T bias = b[co];
            T* dst = out.data() + (n * g.cout + co) * plane;
            for (std::size_t y = 0; y < g.height; ++y) {
                const T* src = acc.data() + co * wide + y * wp;
                for (std::size_t xx = 0; xx < g.width; ++xx) dst[y * g.width + xx] = src[xx] + bias;
            }
        }
    }
    return out;
}

/// Gradients of conv2d. Any of dx/dw/db may be null when not needed.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dout, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
    const auto g = conv_geometry(x.shape(), w.shape(), Shape{w.size(0)});
    const std::size_t plane = g.height * g.width;
    const std::size_t wp = g.padded_width();
    const std::size_t wide = g.wide_plane();
    const std::size_t patch = g.cin * g.k * g.k;
    const auto cout = static_cast<Eigen::Index>(g.cout);
    const auto rows = static_cast<Eigen::Index>(patch);
    if (dw) *dw = Tensor<T>(w.shape());
    if (db) *db = Tensor<T>(Shape{g.cout});
    if (dx) {
        // The input gradient is a same-padded correlation of dout with the spatially
        // flipped, channel-transposed kernel.
        auto flipped = Tensor<T>::uninitialized(Shape{g.cin, g.cout, g.k, g.k});
        const std::size_t kk = g.k * g.k;
        for (std::size_t co = 0; co < g.cout; ++co) {
            for (std::size_t c = 0; c < g.cin; ++c) {
                const T* src = w.data() + (co * g.cin + c) * kk;
                T* dst = flipped.data() + (c * g.cout + co) * kk;
                for (std::size_t t = 0; t < kk; ++t) dst[t] = src[kk - 1 - t];
            }
        }
        *dx = conv2d_forward(dout, flipped, Tensor<T>(Shape{g.cin}));
    }
    if (!dw && !db) return;
    Buffer<T> padded;
    Buffer<T> cols(patch * kConvChunk);
    // Columns x >= width of the wide grid are held at zero so they contribute nothing.
    RowMat<T> grad_wide(cout, static_cast<Eigen::Index>(wide));
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T* src = dout.data() + (n * g.cout + co) * plane;
            T* dst = grad_wide.data() + co * wide;
            for (std::size_t y = 0; y < g.height; ++y) {
                std::copy(src + y * g.width, src + (y + 1) * g.width, dst + y * wp);
                std::fill(dst + y * wp + g.width, dst + (y + 1) * wp, T{0});
            }
            if (db) {
                T acc{0};
                for (std::size_t i = 0; i < plane; ++i) acc += src[i];
                (*db)[co] += acc;
            }
        }
        if (!dw) continue;
        pad_planes(x.data() + n * g.cin * plane, g.cin, g.height, g.width, g.pad(), padded);
        for (std::size_t j0 = 0; j0 < wide; j0 += kConvChunk) {
            const std::size_t len = std::min(kConvChunk, wide - j0);
            const auto cols_n = static_cast<Eigen::Index>(len);
            ConstStridedMap<T> grad(grad_wide.data() + j0, cout, cols_n, Eigen::OuterStride<>(grad_wide.cols()));
            gather_patches(padded.data(), g, j0, len, cols.data());
            MatMap<T>(dw->data(), cout, rows).noalias() +=
                grad * ConstMatMap<T>(cols.data(), rows, cols_n).transpose();
        }
    }
}

} // namespace kernels

namespace ops {

namespace detail_ops {

template <class T>
void push(const Var<T>& v, Tensor<T>&& g) {
    if (v.requires_grad()) v.node()->accumulate(std::move(g));
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

/// Elementwise unary op with derivative computed from (input, output).
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, const char* name, F f, D dfdx) {
    const Tensor<T>& xv = x.value();
    auto out = Tensor<T>::uninitialized(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
    return make_op_result<T>(std::move(out), {&x}, name, [x, dfdx](auto& self) {
        const Tensor<T>& xv = x.value();
        auto g = Tensor<T>::uninitialized(xv.shape());
        for (std::size_t i = 0; i < xv.numel(); ++i) g[i] = self.grad[i] * dfdx(xv[i], self.value[i]);
        push(x, std::move(g));
    });
}

} // namespace detail_ops

/// Cross-correlation with zero padding (k-1)/2, stride 1, plus per-channel bias.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    Tensor<T> out = kernels::conv2d_forward(x.value(), w.value(), b.value());
    return make_op_result<T>(std::move(out), {&x, &w, &b}, "conv2d", [x, w, b](auto& self) {
        Tensor<T> dx, dw, db;
        kernels::conv2d_backward(x.value(), w.value(), self.grad, x.requires_grad() ? &dx : nullptr,
                                 w.requires_grad() ? &dw : nullptr, b.requires_grad() ? &db : nullptr);
        if (x.requires_grad()) detail_ops::push(x, std::move(dx));
        if (w.requires_grad()) detail_ops::push(w, std::move(dw));
        if (b.requires_grad()) detail_ops::push(b, std::move(db));
    });
}

/// Per-sample, per-channel normalization over the spatial plane; no affine terms.
template <class T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
    kernels::require_4d(x.shape(), "instance_norm");
    if (!(eps > T{0})) throw ConfigError("instance_norm eps must be positive");
    const Tensor<T>& xv = x.value();
    const std::size_t planes = xv.size(0) * xv.size(1);
    const std::size_t plane = xv.size(2) * xv.size(3);
    if (plane == 0) throw ShapeError("instance_norm on empty spatial plane");
    auto out = Tensor<T>::uninitialized(xv.shape());
    std::vector<T> rstd(planes);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = xv.data() + p * plane;
        double mean = 0.0;
        for (std::size_t i = 0; i < plane; ++i) mean += src[i];
        mean /= static_cast<double>(plane);
        double var = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double d = src[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(plane);
        const double r = 1.0 / std::sqrt(var + static_cast<double>(eps));
        rstd[p] = static_cast<T>(r);
        T* dst = out.data() + p * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>((src[i] - mean) * r);
    }
    return make_op_result<T>(std::move(out), {&x}, "instance_norm",
                             [x, rstd = std::move(rstd), planes, plane](auto& self) {
        auto g = Tensor<T>::uninitialized(self.value.shape());
        for (std::size_t p = 0; p < planes; ++p) {
            const T* y = self.value.data() + p * plane;
            const T* dy = self.grad.data() + p * plane;
            double mdy = 0.0, mdyy = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                mdy += dy[i];
                mdyy += static_cast<double>(dy[i]) * y[i];
            }
            mdy /= static_cast<double>(plane);
            mdyy /= static_cast<double>(plane);
            T* dst = g.data() + p * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] = static_cast<T>(rstd[p] * (dy[i] - mdy - y[i] * mdyy));
            }
        }
        detail_ops::push(x, std::move(g));
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T alpha = T(0.2)) {
    return detail_ops::unary(
        x, "leaky_relu", [alpha](T v) { return v >= T{0} ? v : alpha * v; },
        [alpha](T v, T) { return v >= T{0} ? T{1} : alpha; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
    return detail_ops::unary(
        x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Smooth bound alpha * (2/pi) * atan(x / alpha); output stays in (-alpha, alpha).
template <class T>
Var<T> soft_clamp(const Var<T>& x, T alpha) {
    if (!(alpha > T{0})) throw ConfigError("soft_clamp alpha must be positive");
    const T k = T(2) / std::numbers::pi_v<T>;
    return detail_ops::unary(
        x, "soft_clamp", [alpha, k](T v) { return alpha * k * std::atan(v / alpha); },
        [alpha, k](T v, T) {
            const T u = v / alpha;
            return k / (T{1} + u * u);
        });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
    return detail_ops::unary(
        x, "scale", [factor](T v) { return factor * v; }, [factor](T, T) { return factor; });
}

template <class T>
Var<T> add_constant(const Var<T>& x, T c) {
    return detail_ops::unary(
        x, "add_constant", [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail_ops::require_same_shape(a, b, "add");
    auto out = Tensor<T>::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_op_result<T>(std::move(out), {&a, &b}, "add", [a, b](auto& self) {
        if (a.requires_grad()) detail_ops::push(a, Tensor<T>(self.grad));
        if (b.requires_grad()) detail_ops::push(b, Tensor<T>(self.grad));
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail_ops::require_same_shape(a, b, "sub");
    auto out = Tensor<T>::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_op_result<T>(std::move(out), {&a, &b}, "sub", [a, b](auto& self) {
        if (a.requires_grad()) detail_ops::push(a, Tensor<T>(self.grad));
        if (b.requires_grad()) {
            auto g = Tensor<T>::uninitialized(self.grad.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -self.grad[i];
            detail_ops::push(b, std::move(g));
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail_ops::require_same_shape(a, b, "mul");
    auto out = Tensor<T>::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_op_result<T>(std::move(out), {&a, &b}, "mul", [a, b](auto& self) {
        if (a.requires_grad()) {
            auto g = Tensor<T>::uninitialized(self.grad.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * b.value()[i];
            detail_ops::push(a, std::move(g));
        }
        if (b.requires_grad()) {
            auto g = Tensor<T>::uninitialized(self.grad.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * a.value()[i];
            detail_ops::push(b, std::move(g));
        }
    });
}

/// Splits along the channel axis into [0, at) and [at, C).
template <class T>
std::pair<Var<T>, Var<T>> channel_split(const Var<T>& x, std::size_t at) {
    kernels::require_4d(x.shape(), "channel_split");
    const Shape& s = x.shape();
    if (at == 0 || at >= s[1]) {
        throw ShapeError("channel_split index " + std::to_string(at) + " invalid for " +
                         std::to_string(s[1]) + " channels");
    }
    const std::size_t plane = s[2] * s[3];
    const std::size_t c_hi = s[1] - at;
    auto lo = Tensor<T>::uninitialized(Shape{s[0], at, s[2], s[3]});
    auto hi = Tensor<T>::uninitialized(Shape{s[0], c_hi, s[2], s[3]});
    for (std::size_t n = 0; n < s[0]; ++n) {
        const T* src = x.value().data() + n * s[1] * plane;
        std::copy(src, src + at * plane, lo.data() + n * at * plane);
        std::copy(src + at * plane, src + s[1] * plane, hi.data() + n * c_hi * plane);
    }
    auto make = [&](Tensor<T> part, std::size_t offset, std::size_t count, const char* name) {
        return make_op_result<T>(std::move(part), {&x}, name,
                                 [x, offset, count, plane](auto& self) {
            const Shape& s = x.shape();
            Tensor<T> g(s);
            for (std::size_t n = 0; n < s[0]; ++n) {
                const T* src = self.grad.data() + n * count * plane;
                std::copy(src, src + count * plane, g.data() + (n * s[1] + offset) * plane);
            }
            detail_ops::push(x, std::move(g));
        });
    };
    return {make(std::move(lo), 0, at, "channel_split"), make(std::move(hi), at, c_hi, "channel_split")};
}

template <class T>
Var<T> channel_concat(const Var<T>& a, const Var<T>& b) {
    kernels::require_4d(a.shape(), "channel_concat");
    kernels::require_4d(b.shape(), "channel_concat");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
        throw ShapeError("channel_concat: incompatible " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t plane = sa[2] * sa[3];
    const std::size_t ca = sa[1], cb = sb[1];
    auto out = Tensor<T>::uninitialized(Shape{sa[0], ca + cb, sa[2], sa[3]});
    for (std::size_t n = 0; n < sa[0]; ++n) {
        T* dst = out.data() + n * (ca + cb) * plane;
        const T* pa = a.value().data() + n * ca * plane;
        const T* pb = b.value().data() + n * cb * plane;
        std::copy(pa, pa + ca * plane, dst);
        std::copy(pb, pb + cb * plane, dst + ca * plane);
    }
    return make_op_result<T>(std::move(out), {&a, &b}, "channel_concat",
                             [a, b, ca, cb, plane](auto& self) {
        const std::size_t batch = self.value.size(0);
        if (a.requires_grad()) {
            auto g = Tensor<T>::uninitialized(a.shape());
            for (std::size_t n = 0; n < batch; ++n) {
                const T* src = self.grad.data() + n * (ca + cb) * plane;
                std::copy(src, src + ca * plane, g.data() + n * ca * plane);
            }
            detail_ops::push(a, std::move(g));
        }
        if (b.requires_grad()) {
            auto g = Tensor<T>::uninitialized(b.shape());
            for (std::size_t n = 0; n < batch; ++n) {
                const T* src = self.grad.data() + n * (ca + cb) * plane + ca * plane;
                std::copy(src, src + cb * plane, g.data() + n * cb * plane);
            }
            detail_ops::push(b, std::move(g));
        }
    });
}

/// Reverses channel order; a volume-preserving, self-inverse permutation.
template <class T>
Var<T> channel_reverse(const Var<T>& x) {
    kernels::require_4d(x.shape(), "channel_reverse");
    const Shape s = x.shape();
    const std::size_t plane = s[2] * s[3];
    auto reverse = [s, plane](const Tensor<T>& in) {
        auto out = Tensor<T>::uninitialized(s);
        for (std::size_t n = 0; n < s[0]; ++n) {
            for (std::size_t c = 0; c < s[1]; ++c) {
                const T* src = in.data() + (n * s[1] + c) * plane;
                std::copy(src, src + plane, out.data() + (n * s[1] + (s[1] - 1 - c)) * plane);
            }
        }
        return out;
    };
    return make_op_result<T>(reverse(x.value()), {&x}, "channel_reverse",
                             [x, reverse](auto& self) { detail_ops::push(x, reverse(self.grad)); });
}

/// Replicates each pixel into a factor x factor block.
template <class T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t factor) {
    kernels::require_4d(x.shape(), "upsample_nearest");
    if (factor == 0) throw ShapeError("upsample_nearest factor must be >= 1");
    const Shape s = x.shape();
    const std::size_t oh = s[2] * factor, ow = s[3] * factor;
    auto out = Tensor<T>::uninitialized(Shape{s[0], s[1], oh, ow});
    for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
        const T* src = x.value().data() + p * s[2] * s[3];
        T* dst = out.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / factor) * s[3] + xx / factor];
        }
    }
    return make_op_result<T>(std::move(out), {&x}, "upsample_nearest", [x, factor](auto& self) {
        const Shape& s = x.shape();
        const std::size_t oh = s[2] * factor, ow = s[3] * factor;
        Tensor<T> g(s);
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
            const T* src = self.grad.data() + p * oh * ow;
            T* dst = g.data() + p * s[2] * s[3];
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t xx = 0; xx < ow; ++xx) dst[(y / factor) * s[3] + xx / factor] += src[y * ow + xx];
            }
        }
        detail_ops::push(x, std::move(g));
    });
}

template <class T>
Var<T> sum(const Var<T>& x) {
    double acc = 0.0;
    for (T v : x.value().values()) acc += v;
    return make_op_result<T>(Tensor<T>::scalar(static_cast<T>(acc)), {&x}, "sum", [x](auto& self) {
        detail_ops::push(x, Tensor<T>(x.shape(), self.grad[0]));
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    const T inv = T{1} / static_cast<T>(x.value().numel());
    return scale(sum(x), inv);
}

/// Sum over all non-batch axes; returns a length-N vector.
template <class T>
Var<T> sum_per_sample(const Var<T>& x) {
    if (x.shape().empty()) throw ShapeError("sum_per_sample needs a batch axis");
    const std::size_t batch = x.shape()[0];
    const std::size_t per = x.value().numel() / batch;
    Tensor<T> out(Shape{batch});
    for (std::size_t n = 0; n < batch; ++n) {
        double acc = 0.0;
        const T* src = x.value().data() + n * per;
        for (std::size_t i = 0; i < per; ++i) acc += src[i];
        out[n] = static_cast<T>(acc);
    }
    return make_op_result<T>(std::move(out), {&x}, "sum_per_sample", [x, batch, per](auto& self) {
        auto g = Tensor<T>::uninitialized(x.shape());
        for (std::size_t n = 0; n < batch; ++n) std::fill_n(g.data() + n * per, per, self.grad[n]);
        detail_ops::push(x, std::move(g));
    });
}

/// Per-sample squared L2 norm; returns a length-N vector.
template <class T>
Var<T> square_sum_per_sample(const Var<T>& x) {
    if (x.shape().empty()) throw ShapeError("square_sum_per_sample needs a batch axis");
    const std::size_t batch = x.shape()[0];
    const std::size_t per = x.value().numel() / batch;
    Tensor<T> out(Shape{batch});
    for (std::size_t n = 0; n < batch; ++n) {
        double acc = 0.0;
        const T* src = x.value().data() + n * per;
        for (std::size_t i = 0; i < per; ++i) acc += static_cast<double>(src[i]) * src[i];
        out[n] = static_cast<T>(acc);
    }
    return make_op_result<T>(std::move(out), {&x}, "square_sum_per_sample",
                             [x, batch, per](auto& self) {
        auto g = Tensor<T>::uninitialized(x.shape());
        for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t i = 0; i < per; ++i) g[n * per + i] = T{2} * x.value()[n * per + i] * self.grad[n];
        }
        detail_ops::push(x, std::move(g));
    });
}

/// Mean absolute difference; the subgradient at equality is zero.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    detail_ops::require_same_shape(a, b, "mean_abs_diff");
    const std::size_t count = a.value().numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) acc += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
    const T inv = T{1} / static_cast<T>(count);
    return make_op_result<T>(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(count))),
                             {&a, &b}, "mean_abs_diff", [a, b, inv](auto& self) {
        auto g = Tensor<T>::uninitialized(a.shape());
        const T go = self.grad[0] * inv;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const T d = a.value()[i] - b.value()[i];
            g[i] = d > T{0} ? go : (d < T{0} ? -go : T{0});
        }
        if (b.requires_grad()) {
            auto gb = Tensor<T>::uninitialized(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] = -g[i];
            detail_ops::push(b, std::move(gb));
        }
        if (a.requires_grad()) detail_ops::push(a, std::move(g));
    });
}

} // namespace ops
} // namespace panflow
