#pragma once

// Max pooling with replicate padding plus channel-wise min/max reductions.
// All three save winner indices on the tape and route gradients to them;
// ties resolve to the first index in scan order.

#include <cstdint>
#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {

enum class PadMode { none, replicate };

inline Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad,
                         PadMode mode = PadMode::replicate) {
    const Shape& s = x.shape();
    if (kernel < 1) throw ParamError("max_pool2d: kernel must be >= 1, got " + std::to_string(kernel));
    if (stride < 1) throw ParamError("max_pool2d: stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) throw ParamError("max_pool2d: pad must be >= 0, got " + std::to_string(pad));
    if (pad > 0 && mode == PadMode::none)
        throw ParamError("max_pool2d: pad > 0 requires replicate mode");
    int hout = (s.h + 2 * pad - kernel) / stride + 1;
    int wout = (s.w + 2 * pad - kernel) / stride + 1;
    if (kernel > s.h + 2 * pad || kernel > s.w + 2 * pad || hout < 1 || wout < 1)
        throw DimensionError("max_pool2d: kernel " + std::to_string(kernel) +
                             " exceeds padded input " + s.str());

    Shape os{s.n, s.c, hout, wout};
    auto argmax = std::make_shared<std::vector<std::int32_t>>(std::size_t(os.numel()));
    auto xn = x.node();
    Tensor out = detail::make_op("max_pool2d", os, {x}, [xn, argmax](Tensor::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::int64_t planes = std::int64_t(xn->shape.n) * xn->shape.c;
        std::int64_t in_plane = std::int64_t(xn->shape.h) * xn->shape.w;
        std::int64_t out_plane = std::int64_t(self.shape.h) * self.shape.w;
        for (std::int64_t p = 0; p < planes; ++p) {
            const float* g = self.grad.data() + p * out_plane;
            const std::int32_t* idx = argmax->data() + p * out_plane;
            float* dst = xn->grad.data() + p * in_plane;
            for (std::int64_t i = 0; i < out_plane; ++i) dst[idx[i]] += g[i];
        }
    });

    std::int64_t planes = std::int64_t(s.n) * s.c;
    std::int64_t in_plane = std::int64_t(s.h) * s.w;
    std::int64_t out_plane = std::int64_t(hout) * wout;
    const float* xd = x.data().data();
    float* od = out.data().data();
    std::int32_t* am = argmax->data();
    parallel_for(planes, [&](std::int64_t p) {
        const float* src = xd + p * in_plane;
        for (int oy = 0; oy < hout; ++oy)
            for (int ox = 0; ox < wout; ++ox) {
                float best = 0.0f;
                std::int32_t best_idx = -1;
                for (int ky = 0; ky < kernel; ++ky) {
                    int iy = oy * stride - pad + ky;
                    iy = iy < 0 ? 0 : (iy >= s.h ? s.h - 1 : iy);  // replicate clamp
                    for (int kx = 0; kx < kernel; ++kx) {
                        int ix = ox * stride - pad + kx;
                        ix = ix < 0 ? 0 : (ix >= s.w ? s.w - 1 : ix);
                        float v = src[std::int64_t(iy) * s.w + ix];
                        if (best_idx < 0 || v > best) {
                            best = v;
                            best_idx = std::int32_t(std::int64_t(iy) * s.w + ix);
                        }
                    }
                }
                od[p * out_plane + std::int64_t(oy) * wout + ox] = best;
                am[p * out_plane + std::int64_t(oy) * wout + ox] = best_idx;
            }
    });
    return out;
}

namespace detail {

template <bool Min>
Tensor channel_extreme(const Tensor& x, const char* op) {
    const Shape& s = x.shape();
    Shape os{s.n, 1, s.h, s.w};
    auto arg = std::make_shared<std::vector<std::int32_t>>(std::size_t(os.numel()));
    auto xn = x.node();
    Tensor out = make_op(op, os, {x}, [xn, arg](Tensor::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const Shape& is = xn->shape;
        std::int64_t plane = std::int64_t(is.h) * is.w;
        for (int n = 0; n < is.n; ++n) {
            const float* g = self.grad.data() + std::int64_t(n) * plane;
            const std::int32_t* idx = arg->data() + std::int64_t(n) * plane;
            float* dst = xn->grad.data() + std::int64_t(n) * is.c * plane;
            for (std::int64_t i = 0; i < plane; ++i) dst[std::int64_t(idx[i]) * plane + i] += g[i];
        }
    });
    std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        const float* src = x.data().data() + std::int64_t(n) * s.c * plane;
        float* od = out.data().data() + std::int64_t(n) * plane;
        std::int32_t* am = arg->data() + std::int64_t(n) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            float best = src[i];
            std::int32_t bc = 0;
            for (int c = 1; c < s.c; ++c) {
                float v = src[std::int64_t(c) * plane + i];
                if (Min ? v < best : v > best) {
                    best = v;
                    bc = c;
                }
            }
            od[i] = best;
            am[i] = bc;
        }
    }
    return out;
}

}  // namespace detail

// (N,C,H,W) -> (N,1,H,W), per-pixel extreme over channels.
inline Tensor channel_min(const Tensor& x) { return detail::channel_extreme<true>(x, "channel_min"); }
inline Tensor channel_max(const Tensor& x) { return detail::channel_extreme<false>(x, "channel_max"); }

}  // namespace falcon
