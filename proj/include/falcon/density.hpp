// Haze density estimation: dark channel as a plain loop reference and its
// differentiable pooling formulation whose tape carries only max reductions.
#pragma once

#include <algorithm>

#include "falcon/errors.hpp"
#include "falcon/pool.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

// Square window edge length for the local minimum; odd so the window centers
// on the pixel.
struct PatchSpec {
    int patch_size = 15;

    void validate() const {
        if (patch_size < 1 || patch_size % 2 == 0)
            throw ParamError("patch size must be odd and >= 1, got " +
                             std::to_string(patch_size));
    }
};

// Per-pixel min over channels, then min over the replicate-padded window.
// Plain loops, never on the tape.
inline Tensor dark_channel(const Tensor& image, const PatchSpec& patch) {
    patch.validate();
    const Shape& s = image.shape();
    if (s.c != 3) throw DimensionError("dark channel expects 3 channels, got " + s.str());
    Tensor out = Tensor::zeros({s.n, 1, s.h, s.w});
    int r = patch.patch_size / 2;
    std::int64_t plane = std::int64_t(s.h) * s.w;
    std::vector<float> chan_min(static_cast<std::size_t>(plane));
    for (int n = 0; n < s.n; ++n) {
        const float* base = image.data().data() + n * 3 * plane;
        for (std::int64_t i = 0; i < plane; ++i)
            chan_min[std::size_t(i)] =
                std::min(base[i], std::min(base[plane + i], base[2 * plane + i]));
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                float m = chan_min[std::size_t(y) * s.w + std::size_t(x)];
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        int yy = std::clamp(y + dy, 0, s.h - 1);
                        int xx = std::clamp(x + dx, 0, s.w - 1);
                        m = std::min(m, chan_min[std::size_t(yy) * s.w + std::size_t(xx)]);
                    }
                out.at(n, 0, y, x) = m;
            }
    }
    return out;
}

// Same value as dark_channel but built from negated max reductions, so the
// backward pass routes each output's gradient to exactly one input element.
inline Tensor ddp(const Tensor& image, const PatchSpec& patch) {
    patch.validate();
    const Shape& s = image.shape();
    if (s.c != 3) throw DimensionError("density pooling expects 3 channels, got " + s.str());
    int r = patch.patch_size / 2;
    Tensor window_min =
        neg(max_pool2d(neg(image), patch.patch_size, 1, r, PadMode::replicate));
    return neg(channel_max(neg(window_min)));
}

// [R, G, B, density] along channels.
inline Tensor concat_cdm(const Tensor& image, const Tensor& mask) {
    const Shape& si = image.shape();
    const Shape& sm = mask.shape();
    if (si.c != 3) throw DimensionError("expected a 3-channel image, got " + si.str());
    if (sm.c != 1 || sm.n != si.n || sm.h != si.h || sm.w != si.w)
        throw DimensionError("mask " + sm.str() + " does not match image " + si.str());
    return concat_channels({image, mask});
}

}  // namespace falcon
