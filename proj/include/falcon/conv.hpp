#pragma once

// conv2d / transpose_conv2d via im2col + GEMM. Everything funnels through
// three accumulate-GEMM kernels whose inner loops the compiler vectorizes;
// summation order per output element is fixed, so results are reproducible
// across thread counts.

#include <cstdint>
#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {
namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_acc(std::int64_t m, std::int64_t k, std::int64_t n, const float* a,
                     const float* b, float* c) {
    parallel_for(m, [&](std::int64_t i) {
        float* ci = c + i * n;
        const float* ai = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            float av = ai[p];
            if (av == 0.0f) continue;
            const float* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    });
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void gemm_atb_acc(std::int64_t m, std::int64_t k, std::int64_t n, const float* a,
                         const float* b, float* c) {
    for (std::int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        const float* bi = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            float av = ai[p];
            if (av == 0.0f) continue;
            float* cp = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

// C[M,K] += A[M,N] * B[K,N]^T
inline void gemm_abt_acc(std::int64_t m, std::int64_t k, std::int64_t n, const float* a,
                         const float* b, float* c) {
    parallel_for(m, [&](std::int64_t i) {
        const float* ai = a + i * n;
        float* ci = c + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const float* bp = b + p * n;
            float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
            std::int64_t j = 0;
            for (; j + 4 <= n; j += 4) {
                s0 += ai[j] * bp[j];
                s1 += ai[j + 1] * bp[j + 1];
                s2 += ai[j + 2] * bp[j + 2];
                s3 += ai[j + 3] * bp[j + 3];
            }
            float s = (s0 + s1) + (s2 + s3);
            for (; j < n; ++j) s += ai[j] * bp[j];
            ci[p] += s;
        }
    });
}

// Zero-padded gather: col[(C*kh*kw) x (Hout*Wout)] for one sample.
inline void im2col(const float* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int hout, int wout, float* col) {
    std::int64_t cols = std::int64_t(hout) * wout;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                float* dst = col + ((std::int64_t(ch) * kh + ky) * kw + kx) * cols;
                const float* src = x + std::int64_t(ch) * h * w;
                for (int oy = 0; oy < hout; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wout; ++ox) dst[std::int64_t(oy) * wout + ox] = 0.0f;
                        continue;
                    }
                    for (int ox = 0; ox < wout; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[std::int64_t(oy) * wout + ox] =
                            (ix < 0 || ix >= w) ? 0.0f : src[std::int64_t(iy) * w + ix];
                    }
                }
            }
}

// Scatter-add inverse of im2col.
inline void col2im_acc(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                       int hout, int wout, float* x) {
    std::int64_t cols = std::int64_t(hout) * wout;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const float* src = col + ((std::int64_t(ch) * kh + ky) * kw + kx) * cols;
                float* dst = x + std::int64_t(ch) * h * w;
                for (int oy = 0; oy < hout; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wout; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[std::int64_t(iy) * w + ix] += src[std::int64_t(oy) * wout + ox];
                    }
                }
            }
}

}  // namespace detail

// x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), bias: (1,Cout,1,1) or invalid for none.
// Zero padding, floor output dims. Weight and bias may require grad.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1,
                     int pad = 0) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (stride < 1) throw ParamError("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) throw ParamError("conv2d: pad must be >= 0, got " + std::to_string(pad));
    if (ws.c != xs.c)
        throw DimensionError("conv2d: weight expects " + std::to_string(ws.c) +
                             " input channels, tensor has " + std::to_string(xs.c));
    int hout = (xs.h + 2 * pad - ws.h) / stride + 1;
    int wout = (xs.w + 2 * pad - ws.w) / stride + 1;
    if (ws.h > xs.h + 2 * pad || ws.w > xs.w + 2 * pad || hout < 1 || wout < 1)
        throw DimensionError("conv2d: kernel " + std::to_string(ws.h) + "x" + std::to_string(ws.w) +
                             " exceeds padded input " + xs.str());
    bool has_bias = bias.valid();
    if (has_bias && (bias.shape().c != ws.n || bias.shape().n != 1 || bias.shape().h != 1 ||
                     bias.shape().w != 1))
        throw DimensionError("conv2d: bias shape " + bias.shape().str() + " for " +
                             std::to_string(ws.n) + " output channels");

    Shape os{xs.n, ws.n, hout, wout};
    std::int64_t k = std::int64_t(ws.c) * ws.h * ws.w;
    std::int64_t cols = std::int64_t(hout) * wout;

    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    int kh = ws.h, kw = ws.w;
    auto backward = [xn, wn, bn, os, k, cols, kh, kw, stride, pad](Tensor::Node& self) {
        const Shape& is = xn->shape;
        std::vector<float> col(std::size_t(k * cols));
        std::vector<float> dcol;
        if (xn->requires_grad) {
            xn->ensure_grad();
            dcol.resize(std::size_t(k * cols));
        }
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        for (int n = 0; n < is.n; ++n) {
            const float* dout = self.grad.data() + std::int64_t(n) * os.c * cols;
            if (wn->requires_grad || xn->requires_grad)
                detail::im2col(xn->data.data() + std::int64_t(n) * is.c * is.h * is.w, is.c, is.h,
                               is.w, kh, kw, stride, pad, os.h, os.w, col.data());
            if (wn->requires_grad)
                detail::gemm_abt_acc(os.c, k, cols, dout, col.data(), wn->grad.data());
            if (xn->requires_grad) {
                std::fill(dcol.begin(), dcol.end(), 0.0f);
                detail::gemm_atb_acc(os.c, k, cols, wn->data.data(), dout, dcol.data());
                detail::col2im_acc(dcol.data(), is.c, is.h, is.w, kh, kw, stride, pad, os.h, os.w,
                                   xn->grad.data() + std::int64_t(n) * is.c * is.h * is.w);
            }
            if (bn && bn->requires_grad)
                for (int c = 0; c < os.c; ++c) {
                    const float* g = dout + std::int64_t(c) * cols;
                    float s = 0.0f;
                    for (std::int64_t i = 0; i < cols; ++i) s += g[i];
                    bn->grad[c] += s;
                }
        }
    };

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    Tensor out = detail::make_op("conv2d", os, parents, backward);

    std::vector<float> col(std::size_t(k * cols));
    for (int n = 0; n < xs.n; ++n) {
        detail::im2col(x.data().data() + std::int64_t(n) * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w,
                       ws.h, ws.w, stride, pad, hout, wout, col.data());
        float* o = out.data().data() + std::int64_t(n) * os.c * cols;
        if (has_bias)
            for (int c = 0; c < os.c; ++c)
                std::fill(o + std::int64_t(c) * cols, o + std::int64_t(c + 1) * cols, bias.data()[c]);
        detail::gemm_acc(os.c, k, cols, w.data().data(), col.data(), o);
    }
    return out;
}

// x: (N,Cin,H,W), w: (Cin,Cout,kh,kw), output (H-1)*stride + kh (no padding).
inline Tensor transpose_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                               int stride = 2) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (stride < 1)
        throw ParamError("transpose_conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (ws.n != xs.c)
        throw DimensionError("transpose_conv2d: weight expects " + std::to_string(ws.n) +
                             " input channels, tensor has " + std::to_string(xs.c));
    int hout = (xs.h - 1) * stride + ws.h;
    int wout = (xs.w - 1) * stride + ws.w;
    bool has_bias = bias.valid();
    if (has_bias && (bias.shape().c != ws.c || bias.shape().n != 1 || bias.shape().h != 1 ||
                     bias.shape().w != 1))
        throw DimensionError("transpose_conv2d: bias shape " + bias.shape().str() + " for " +
                             std::to_string(ws.c) + " output channels");

    Shape os{xs.n, ws.c, hout, wout};
    std::int64_t k2 = std::int64_t(ws.c) * ws.h * ws.w;      // Cout*kh*kw
    std::int64_t cells = std::int64_t(xs.h) * xs.w;          // input grid positions
    int kh = ws.h, kw = ws.w;

    // cols[(Cout*kh*kw) x (H*W)] maps to output at oy=iy*stride+ky.
    auto scatter = [os, kh, kw, stride](const float* cols, int hin, int win, float* outp) {
        std::int64_t cells_ = std::int64_t(hin) * win;
        for (int c = 0; c < os.c; ++c)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const float* src = cols + ((std::int64_t(c) * kh + ky) * kw + kx) * cells_;
                    float* dst = outp + std::int64_t(c) * os.h * os.w;
                    for (int iy = 0; iy < hin; ++iy) {
                        float* row = dst + std::int64_t(iy * stride + ky) * os.w + kx;
                        const float* s = src + std::int64_t(iy) * win;
                        for (int ix = 0; ix < win; ++ix) row[std::int64_t(ix) * stride] += s[ix];
                    }
                }
    };
    auto gather = [os, kh, kw, stride](const float* outg, int hin, int win, float* cols) {
        std::int64_t cells_ = std::int64_t(hin) * win;
        for (int c = 0; c < os.c; ++c)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    float* dst = cols + ((std::int64_t(c) * kh + ky) * kw + kx) * cells_;
                    const float* src = outg + std::int64_t(c) * os.h * os.w;
                    for (int iy = 0; iy < hin; ++iy) {
                        const float* row = src + std::int64_t(iy * stride + ky) * os.w + kx;
                        float* d = dst + std::int64_t(iy) * win;
                        for (int ix = 0; ix < win; ++ix) d[ix] = row[std::int64_t(ix) * stride];
                    }
                }
    };

    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    auto backward = [xn, wn, bn, os, k2, cells, gather](Tensor::Node& self) {
        const Shape& is = xn->shape;
        std::vector<float> dcols(std::size_t(k2 * cells));
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        std::int64_t outplane = std::int64_t(os.h) * os.w;
        for (int n = 0; n < is.n; ++n) {
            const float* dout = self.grad.data() + std::int64_t(n) * os.c * outplane;
            gather(dout, is.h, is.w, dcols.data());
            if (xn->requires_grad)
                detail::gemm_acc(is.c, k2, cells, wn->data.data(), dcols.data(),
                                 xn->grad.data() + std::int64_t(n) * is.c * cells);
            if (wn->requires_grad)
                detail::gemm_abt_acc(is.c, k2, cells,
                                     xn->data.data() + std::int64_t(n) * is.c * cells, dcols.data(),
                                     wn->grad.data());
            if (bn && bn->requires_grad)
                for (int c = 0; c < os.c; ++c) {
                    const float* g = dout + std::int64_t(c) * outplane;
                    float s = 0.0f;
                    for (std::int64_t i = 0; i < outplane; ++i) s += g[i];
                    bn->grad[c] += s;
                }
        }
    };

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    Tensor out = detail::make_op("transpose_conv2d", os, parents, backward);

    std::vector<float> cols(std::size_t(k2 * cells));
    std::int64_t outplane = std::int64_t(hout) * wout;
    for (int n = 0; n < xs.n; ++n) {
        std::fill(cols.begin(), cols.end(), 0.0f);
        detail::gemm_atb_acc(xs.c, k2, cells, w.data().data(),
                             x.data().data() + std::int64_t(n) * xs.c * cells, cols.data());
        float* o = out.data().data() + std::int64_t(n) * os.c * outplane;
        if (has_bias)
            for (int c = 0; c < os.c; ++c)
                std::fill(o + std::int64_t(c) * outplane, o + std::int64_t(c + 1) * outplane,
                          bias.data()[c]);
        scatter(cols.data(), xs.h, xs.w, o);
    }
    return out;
}

}  // namespace falcon
