#pragma once

// Differentiable 2-D real FFT. rfft2 packs the half spectrum (w <= W/2) as
// real parts in channels [0,C) and imaginary parts in [C,2C); irfft2 undoes
// it given the original (H,W). Forward transform is unnormalized, inverse
// carries 1/(H*W). Both are linear maps, so their backward passes are the
// exact adjoints, computed with the same transform machinery.
//
// Lengths: iterative radix-2 for powers of two, direct DFT otherwise.

#include <complex>
#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {
namespace detail {

struct FftPlan {
    int n = 0;
    bool pow2 = false;
    std::vector<int> bitrev;
    std::vector<std::complex<float>> tw_fwd;  // stage-packed e^{-2pi i j/len}
    std::vector<std::complex<float>> tw_inv;
    std::vector<std::complex<float>> roots_fwd;  // e^{-2pi i k/n}, direct path
    std::vector<std::complex<float>> roots_inv;
};

inline std::shared_ptr<const FftPlan> fft_plan(int n) {
    thread_local std::unordered_map<int, std::shared_ptr<const FftPlan>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;

    auto plan = std::make_shared<FftPlan>();
    plan->n = n;
    plan->pow2 = (n & (n - 1)) == 0;
    const double pi = 3.14159265358979323846;
    if (plan->pow2 && n > 1) {
        plan->bitrev.resize(n);
        int bits = 0;
        while ((1 << bits) < n) ++bits;
        for (int i = 0; i < n; ++i) {
            int r = 0;
            for (int b = 0; b < bits; ++b)
                if (i & (1 << b)) r |= 1 << (bits - 1 - b);
            plan->bitrev[i] = r;
        }
        for (int len = 2; len <= n; len <<= 1)
            for (int j = 0; j < len / 2; ++j) {
                double a = 2.0 * pi * j / len;
                plan->tw_fwd.emplace_back(float(std::cos(a)), float(-std::sin(a)));
                plan->tw_inv.emplace_back(float(std::cos(a)), float(std::sin(a)));
            }
    } else {
        plan->roots_fwd.resize(n);
        plan->roots_inv.resize(n);
        for (int k = 0; k < n; ++k) {
            double a = 2.0 * pi * k / n;
            plan->roots_fwd[k] = {float(std::cos(a)), float(-std::sin(a))};
            plan->roots_inv[k] = {float(std::cos(a)), float(std::sin(a))};
        }
    }
    cache.emplace(n, plan);
    return cache[n];
}

// In-place length-n transform; sign -1 forward, +1 inverse. No scaling.
inline void fft_1d(std::complex<float>* v, int n, int sign) {
    if (n == 1) return;
    auto plan = fft_plan(n);
    if (plan->pow2) {
        const auto& tw = sign < 0 ? plan->tw_fwd : plan->tw_inv;
        for (int i = 0; i < n; ++i) {
            int r = plan->bitrev[i];
            if (i < r) std::swap(v[i], v[r]);
        }
        std::size_t tbase = 0;
        for (int len = 2; len <= n; len <<= 1) {
            int half = len / 2;
            for (int start = 0; start < n; start += len)
                for (int j = 0; j < half; ++j) {
                    std::complex<float> w = tw[tbase + j];
                    std::complex<float> a = v[start + j];
                    std::complex<float> b = v[start + j + half] * w;
                    v[start + j] = a + b;
                    v[start + j + half] = a - b;
                }
            tbase += half;
        }
    } else {
        const auto& roots = sign < 0 ? plan->roots_fwd : plan->roots_inv;
        std::vector<std::complex<float>> tmp(n);
        for (int k = 0; k < n; ++k) {
            std::complex<double> acc = 0.0;
            std::int64_t jk = 0;
            for (int j = 0; j < n; ++j) {
                acc += std::complex<double>(v[j]) * std::complex<double>(roots[jk]);
                jk += k;
                if (jk >= n) jk -= n;
            }
            tmp[k] = {float(acc.real()), float(acc.imag())};
        }
        std::copy(tmp.begin(), tmp.end(), v);
    }
}

// Full complex 2-D transform of an h*w row-major buffer.
inline void fft_2d(std::complex<float>* buf, int h, int w, int sign) {
    for (int y = 0; y < h; ++y) fft_1d(buf + std::int64_t(y) * w, w, sign);
    if (h == 1) return;
    std::vector<std::complex<float>> col(h);
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) col[y] = buf[std::int64_t(y) * w + x];
        fft_1d(col.data(), h, sign);
        for (int y = 0; y < h; ++y) buf[std::int64_t(y) * w + x] = col[y];
    }
}

}  // namespace detail

// (N,C,H,W) -> (N,2C,H,W/2+1); unnormalized forward DFT, half spectrum.
inline Tensor rfft2(const Tensor& x) {
    const Shape& s = x.shape();
    int wh = s.w / 2 + 1;
    Shape os{s.n, 2 * s.c, s.h, wh};
    int H = s.h, W = s.w, C = s.c;

    auto xn = x.node();
    Tensor out = detail::make_op("rfft2", os, {x}, [xn, H, W, C, wh](Tensor::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        // Adjoint: zero-extend the half-spectrum grad to full width, run the
        // +i-sign transform, keep the real part.
        std::vector<std::complex<float>> buf(std::size_t(H) * W);
        std::int64_t gplane = std::int64_t(H) * wh;
        std::int64_t xplane = std::int64_t(H) * W;
        int N = xn->shape.n;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* gre = self.grad.data() + ((std::int64_t(n) * 2 * C) + c) * gplane;
                const float* gim = self.grad.data() + ((std::int64_t(n) * 2 * C) + C + c) * gplane;
                std::fill(buf.begin(), buf.end(), std::complex<float>(0.0f, 0.0f));
                for (int y = 0; y < H; ++y)
                    for (int xw = 0; xw < wh; ++xw)
                        buf[std::int64_t(y) * W + xw] = {gre[std::int64_t(y) * wh + xw],
                                                         gim[std::int64_t(y) * wh + xw]};
                detail::fft_2d(buf.data(), H, W, +1);
                float* dst = xn->grad.data() + (std::int64_t(n) * C + c) * xplane;
                for (std::int64_t i = 0; i < xplane; ++i) dst[i] += buf[i].real();
            }
    });

    std::vector<std::complex<float>> buf(std::size_t(H) * W);
    std::int64_t gplane = std::int64_t(H) * wh;
    std::int64_t xplane = std::int64_t(H) * W;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x.data().data() + (std::int64_t(n) * C + c) * xplane;
            for (std::int64_t i = 0; i < xplane; ++i) buf[i] = {src[i], 0.0f};
            detail::fft_2d(buf.data(), H, W, -1);
            float* ore = out.data().data() + ((std::int64_t(n) * 2 * C) + c) * gplane;
            float* oim = out.data().data() + ((std::int64_t(n) * 2 * C) + C + c) * gplane;
            for (int y = 0; y < H; ++y)
                for (int xw = 0; xw < wh; ++xw) {
                    ore[std::int64_t(y) * wh + xw] = buf[std::int64_t(y) * W + xw].real();
                    oim[std::int64_t(y) * wh + xw] = buf[std::int64_t(y) * W + xw].imag();
                }
        }
    return out;
}

// (N,2C,H,W/2+1) + declared (h,w) -> (N,C,h,w). Inverse carries 1/(H*W);
// redundant bins are reconstructed by conjugate mirroring.
inline Tensor irfft2(const Tensor& x, int h, int w) {
    const Shape& s = x.shape();
    if (h < 1 || w < 1)
        throw DimensionError("irfft2: declared dims must be >= 1, got (" + std::to_string(h) + "," +
                             std::to_string(w) + ")");
    if (s.c % 2 != 0)
        throw DimensionError("irfft2: expected stacked re/im channels, got " + std::to_string(s.c));
    if (s.h != h || s.w != w / 2 + 1)
        throw DimensionError("irfft2: spectrum " + s.str() + " inconsistent with declared (" +
                             std::to_string(h) + "," + std::to_string(w) + "), want (" +
                             std::to_string(h) + "," + std::to_string(w / 2 + 1) + ") spatial");
    int C = s.c / 2, wh = s.w;
    Shape os{s.n, C, h, w};
    float inv_hw = 1.0f / (float(h) * float(w));

    auto xn = x.node();
    Tensor out = detail::make_op("irfft2", os, {x}, [xn, h, w, wh, C, inv_hw](Tensor::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        // Adjoint: forward transform of the output grad; stored bins that
        // stand for a mirrored pair pick up a factor 2.
        std::vector<std::complex<float>> buf(std::size_t(h) * w);
        std::int64_t gplane = std::int64_t(h) * w;
        std::int64_t splane = std::int64_t(h) * wh;
        int N = xn->shape.n;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* g = self.grad.data() + (std::int64_t(n) * C + c) * gplane;
                for (std::int64_t i = 0; i < gplane; ++i) buf[i] = {g[i], 0.0f};
                detail::fft_2d(buf.data(), h, w, -1);
                float* dre = xn->grad.data() + ((std::int64_t(n) * 2 * C) + c) * splane;
                float* dim = xn->grad.data() + ((std::int64_t(n) * 2 * C) + C + c) * splane;
                for (int y = 0; y < h; ++y)
                    for (int xw = 0; xw < wh; ++xw) {
                        bool self_col = xw == 0 || (w % 2 == 0 && xw == w / 2);
                        float k = (self_col ? 1.0f : 2.0f) * inv_hw;
                        std::complex<float> v = buf[std::int64_t(y) * w + xw];
                        dre[std::int64_t(y) * wh + xw] += k * v.real();
                        dim[std::int64_t(y) * wh + xw] += k * v.imag();
                    }
            }
    });

    std::vector<std::complex<float>> buf(std::size_t(h) * w);
    std::int64_t gplane = std::int64_t(h) * w;
    std::int64_t splane = std::int64_t(h) * wh;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < C; ++c) {
            const float* re = x.data().data() + ((std::int64_t(n) * 2 * C) + c) * splane;
            const float* im = x.data().data() + ((std::int64_t(n) * 2 * C) + C + c) * splane;
            for (int y = 0; y < h; ++y) {
                for (int xw = 0; xw < wh; ++xw)
                    buf[std::int64_t(y) * w + xw] = {re[std::int64_t(y) * wh + xw],
                                                     im[std::int64_t(y) * wh + xw]};
                for (int xw = wh; xw < w; ++xw) {
                    int my = (h - y) % h, mx = w - xw;
                    buf[std::int64_t(y) * w + xw] =
                        std::conj(std::complex<float>(re[std::int64_t(my) * wh + mx],
                                                      im[std::int64_t(my) * wh + mx]));
                }
            }
            detail::fft_2d(buf.data(), h, w, +1);
            float* dst = out.data().data() + (std::int64_t(n) * C + c) * gplane;
            for (std::int64_t i = 0; i < gplane; ++i) dst[i] = buf[i].real() * inv_hw;
        }
    return out;
}

}  // namespace falcon
