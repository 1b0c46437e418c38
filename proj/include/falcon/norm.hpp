#pragma once

// Batch normalization over (N,H,W) per channel. Train mode normalizes with
// batch statistics (biased variance) and folds them into the running stats
// with momentum 0.1; eval mode consumes the running stats and refuses to run
// before any batch has been seen. Backward in train mode is the full formula,
// including the paths through mean and variance.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {

struct BnStats {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    std::int64_t batches = 0;  // 0 = eval would be meaningless
    std::string label;

    void init(int channels, std::string name) {
        running_mean.assign(channels, 0.0f);
        running_var.assign(channels, 1.0f);
        batches = 0;
        label = std::move(name);
    }
    bool initialized() const { return batches > 0; }
};

inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnStats& stats,
                         Mode mode, float momentum = 0.1f, float eps = 1e-5f) {
    const Shape& s = x.shape();
    int C = s.c;
    auto check_param = [&](const Tensor& p, const char* name) {
        if (p.shape().n != 1 || p.shape().c != C || p.shape().h != 1 || p.shape().w != 1)
            throw DimensionError(std::string("batch_norm: ") + name + " shape " + p.shape().str() +
                                 " for " + std::to_string(C) + " channels");
    };
    check_param(gamma, "gamma");
    check_param(beta, "beta");
    if (int(stats.running_mean.size()) != C)
        throw DimensionError("batch_norm: stats sized " + std::to_string(stats.running_mean.size()) +
                             " for " + std::to_string(C) + " channels (" + stats.label + ")");

    std::int64_t plane = std::int64_t(s.h) * s.w;
    std::int64_t m = std::int64_t(s.n) * plane;  // elements per channel
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();

    std::vector<float> mean(C), inv(C);
    if (mode == Mode::train) {
        if (m < 2)
            throw DimensionError("batch_norm: train mode needs >= 2 elements per channel, got " +
                                 std::to_string(m) + " (" + stats.label + ")");
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const float* p = x.data().data() + (std::int64_t(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            }
            double mu = acc / double(m);
            double vacc = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const float* p = x.data().data() + (std::int64_t(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    double d = p[i] - mu;
                    vacc += d * d;
                }
            }
            double var = vacc / double(m);
            mean[c] = float(mu);
            inv[c] = float(1.0 / std::sqrt(var + eps));
            stats.running_mean[c] = (1.0f - momentum) * stats.running_mean[c] + momentum * float(mu);
            stats.running_var[c] =
                (1.0f - momentum) * stats.running_var[c] + momentum * float(var * double(m) / double(m - 1));
        }
        stats.batches += 1;
    } else {
        if (!stats.initialized())
            throw StateError("batch_norm: eval with uninitialized running stats (" + stats.label +
                             "); run at least one training batch or load trained weights");
        for (int c = 0; c < C; ++c) {
            mean[c] = stats.running_mean[c];
            inv[c] = float(1.0 / std::sqrt(double(stats.running_var[c]) + eps));
        }
    }

    auto xhat = std::make_shared<std::vector<float>>(x.data().size());
    {
        const float* xd = x.data().data();
        float* hd = xhat->data();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < C; ++c) {
                const float mu = mean[c], iv = inv[c];
                std::int64_t off = (std::int64_t(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) hd[off + i] = (xd[off + i] - mu) * iv;
            }
    }

    bool train_stats = mode == Mode::train;
    Tensor out = detail::make_op(
        "batch_norm", s, {x, gamma, beta},
        [xn, gn, bn, xhat, inv, m, plane, C, train_stats](Tensor::Node& self) {
            const Shape& is = xn->shape;
            const float* hd = xhat->data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < is.n; ++n) {
                    std::int64_t off = (std::int64_t(n) * C + c) * plane;
                    const float* g = self.grad.data() + off;
                    const float* h = hd + off;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += g[i];
                        sum_dy_xhat += double(g[i]) * h[i];
                    }
                }
                if (gn->requires_grad) gn->grad[c] += float(sum_dy_xhat);
                if (bn->requires_grad) bn->grad[c] += float(sum_dy);
                if (!xn->requires_grad) continue;
                float gam = gn->data[c], iv = inv[c];
                if (train_stats) {
                    float k = gam * iv / float(m);
                    float sdy = float(sum_dy), sdyh = float(sum_dy_xhat);
                    for (int n = 0; n < is.n; ++n) {
                        std::int64_t off = (std::int64_t(n) * C + c) * plane;
                        const float* g = self.grad.data() + off;
                        const float* h = hd + off;
                        float* dx = xn->grad.data() + off;
                        for (std::int64_t i = 0; i < plane; ++i)
                            dx[i] += k * (float(m) * g[i] - sdy - h[i] * sdyh);
                    }
                } else {
                    // Eval stats are constants; the map is affine in x.
                    float k = gam * iv;
                    for (int n = 0; n < is.n; ++n) {
                        std::int64_t off = (std::int64_t(n) * C + c) * plane;
                        const float* g = self.grad.data() + off;
                        float* dx = xn->grad.data() + off;
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += k * g[i];
                    }
                }
            }
        });

    {
        const float* hd = xhat->data();
        float* od = out.data().data();
        const float* gd = gamma.data().data();
        const float* bd = beta.data().data();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < C; ++c) {
                std::int64_t off = (std::int64_t(n) * C + c) * plane;
                const float g = gd[c], b = bd[c];
                for (std::int64_t i = 0; i < plane; ++i) od[off + i] = g * hd[off + i] + b;
            }
    }
    return out;
}

}  // namespace falcon
