// Training objectives: pixel MSE, perceptual distance through a frozen
// feature stack, and density-map agreement, combined by validated weights.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "falcon/conv.hpp"
#include "falcon/density.hpp"
#include "falcon/errors.hpp"
#include "falcon/network.hpp"
#include "falcon/pool.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

struct LossWeights {
    float alpha = 1.0f;  // pixel term
    float beta = 0.01f;  // perceptual term
    float gamma = 1.0f;  // density-map term

    void validate() const {
        if (alpha < 0.0f || beta < 0.0f || gamma < 0.0f)
            throw ConfigError("loss weights must be non-negative");
        if (alpha == 0.0f && beta == 0.0f && gamma == 0.0f)
            throw ConfigError("at least one loss weight must be positive");
    }
};

// VGG-16-shaped conv/ReLU/pool stack, frozen. Default weights are seeded
// random (seed 42): fixed random features still define a valid perceptual
// metric, and real VGG-16 weights can be imported from the same weight-file
// container. Input is [0,1] RGB; vgg_normalize applies the standard
// mean/std transform expected by pre-trained weights.
struct FeatureExtractor {
    struct Layer {
        enum Kind { conv3x3, relu_act, pool2 } kind;
        Tensor w, b;  // conv layers only
    };

    std::vector<Layer> layers;
    std::vector<int> taps{3, 8, 15};
    bool vgg_normalize = false;

    FeatureExtractor() {
        std::mt19937 rng(42);
        auto conv_layer = [&](int cin, int cout) {
            float stddev = std::sqrt(2.0f / (float(cin) * 9.0f));
            layers.push_back({Layer::conv3x3, Tensor::randn({cout, cin, 3, 3}, rng, stddev),
                              Tensor::zeros({1, cout, 1, 1})});
        };
        auto act = [&] { layers.push_back({Layer::relu_act, Tensor(), Tensor()}); };
        auto pool = [&] { layers.push_back({Layer::pool2, Tensor(), Tensor()}); };
        conv_layer(3, 64);    // 0
        act();                // 1
        conv_layer(64, 64);   // 2
        act();                // 3, first tap
        pool();               // 4
        conv_layer(64, 128);  // 5
        act();                // 6
        conv_layer(128, 128); // 7
        act();                // 8, second tap
        pool();               // 9
        conv_layer(128, 256); // 10
        act();                // 11
        conv_layer(256, 256); // 12
        act();                // 13
        conv_layer(256, 256); // 14
        act();                // 15, third tap
    }

    // Feature maps in tap order.
    std::vector<Tensor> features(const Tensor& x) const {
        if (x.shape().c != 3)
            throw DimensionError("feature extractor expects 3 channels, got " + x.shape().str());
        for (int t : taps)
            if (t < 0 || t >= int(layers.size()))
                throw ConfigError("feature tap " + std::to_string(t) + " out of range, stack has " +
                                  std::to_string(layers.size()) + " layers");
        Tensor cur = x;
        if (vgg_normalize) cur = normalize_rgb(cur);
        std::vector<Tensor> at_layer(layers.size());
        int deepest = *std::max_element(taps.begin(), taps.end());
        for (int i = 0; i <= deepest; ++i) {
            const Layer& l = layers[std::size_t(i)];
            switch (l.kind) {
                case Layer::conv3x3: cur = conv2d(cur, l.w, l.b, 1, 1); break;
                case Layer::relu_act: cur = relu(cur); break;
                case Layer::pool2: cur = max_pool2d(cur, 2, 2, 0, PadMode::none); break;
            }
            at_layer[std::size_t(i)] = cur;
        }
        std::vector<Tensor> out;
        for (int t : taps) out.push_back(at_layer[std::size_t(t)]);
        return out;
    }

    // Replaces the stack's conv weights from a weight-file snapshot keyed
    // feat<idx>.weight / feat<idx>.bias by layer index.
    void import(const ModelWeights& weights) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].kind != Layer::conv3x3) continue;
            std::string base = "feat" + std::to_string(i);
            const Tensor* w = weights.find(base + ".weight");
            const Tensor* b = weights.find(base + ".bias");
            if (!w || !b) throw WeightFormatError("extractor snapshot lacks " + base, -1);
            if (!(w->shape() == layers[i].w.shape()) || !(b->shape() == layers[i].b.shape()))
                throw WeightFormatError("extractor tensor " + base + " has the wrong shape", -1);
            std::copy(w->data().begin(), w->data().end(), layers[i].w.data().begin());
            std::copy(b->data().begin(), b->data().end(), layers[i].b.data().begin());
        }
    }

    void load(const std::string& path) { import(load_weights(path)); }

    ModelWeights snapshot() const {
        ModelWeights out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].kind != Layer::conv3x3) continue;
            std::string base = "feat" + std::to_string(i);
            out.entries.push_back({base + ".weight", layers[i].w.clone()});
            out.entries.push_back({base + ".bias", layers[i].b.clone()});
        }
        return out;
    }

  private:
    // Standard ImageNet mean/std transform, realized as a diagonal 1x1 conv
    // so it rides the existing differentiable ops.
    static Tensor normalize_rgb(const Tensor& x) {
        const float mean[3] = {0.485f, 0.456f, 0.406f};
        const float stdev[3] = {0.229f, 0.224f, 0.225f};
        std::vector<float> w(9, 0.0f), b(3);
        for (int c = 0; c < 3; ++c) {
            w[std::size_t(c) * 3 + std::size_t(c)] = 1.0f / stdev[c];
            b[std::size_t(c)] = -mean[c] / stdev[c];
        }
        return conv2d(x, Tensor::from_data({3, 3, 1, 1}, w), Tensor::from_data({1, 3, 1, 1}, b),
                      1, 0);
    }
};

// Mean squared pixel difference.
inline Tensor loss_img(const Tensor& j_hat, const Tensor& j) { return mse(j_hat, j); }

// Feature distance at the mid tap plus Gram-matrix style distance over all
// taps, both as squared-norm sums. The reference image contributes constants
// only: its features are computed off-tape so gradients reach j_hat alone.
inline Tensor loss_perceptual(const Tensor& j_hat, const Tensor& j,
                              const FeatureExtractor& extractor) {
    std::vector<Tensor> f_hat = extractor.features(j_hat);
    std::vector<Tensor> f_ref;
    {
        NoGradGuard ng;
        f_ref = extractor.features(j);
    }
    // Concept term: the middle tap.
    std::size_t mid = extractor.taps.size() / 2;
    Tensor total = sse(f_hat[mid], f_ref[mid]);
    for (std::size_t i = 0; i < f_hat.size(); ++i)
        total = add(total, sse(gram(f_hat[i]), gram(f_ref[i])));
    return total;
}

// Mean squared difference of haze density maps.
inline Tensor loss_map(const Tensor& j_hat, const Tensor& j, const PatchSpec& patch) {
    Tensor map_hat = ddp(j_hat, patch);
    Tensor map_ref;
    {
        NoGradGuard ng;
        map_ref = ddp(j, patch);
    }
    return mse(map_hat, map_ref);
}

struct LossBreakdown {
    Tensor img, perceptual, map, total;

    float img_value() const { return img.valid() ? img.data()[0] : 0.0f; }
    float perceptual_value() const { return perceptual.valid() ? perceptual.data()[0] : 0.0f; }
    float map_value() const { return map.valid() ? map.data()[0] : 0.0f; }
    float total_value() const { return total.data()[0]; }
};

// Weighted combination. Components with zero weight are skipped entirely
// (no extractor or density pass) and report as invalid tensors / 0. The
// extractor may be null as long as the perceptual weight is zero.
inline LossBreakdown loss_final(const Tensor& j_hat, const Tensor& j, const LossWeights& weights,
                                const FeatureExtractor* extractor, const PatchSpec& patch) {
    weights.validate();
    if (weights.beta > 0.0f && extractor == nullptr)
        throw ConfigError("perceptual weight is positive but no feature extractor was given");
    LossBreakdown out;
    Tensor total;
    auto accumulate = [&](const Tensor& term, float weight) {
        Tensor scaled = scale(term, weight);
        total = total.valid() ? add(total, scaled) : scaled;
    };
    if (weights.alpha > 0.0f) {
        out.img = loss_img(j_hat, j);
        accumulate(out.img, weights.alpha);
    }
    if (weights.beta > 0.0f) {
        out.perceptual = loss_perceptual(j_hat, j, *extractor);
        accumulate(out.perceptual, weights.beta);
    }
    if (weights.gamma > 0.0f) {
        out.map = loss_map(j_hat, j, patch);
        accumulate(out.map, weights.gamma);
    }
    out.total = total;
    return out;
}

inline LossBreakdown loss_final(const Tensor& j_hat, const Tensor& j, const LossWeights& weights,
                                const FeatureExtractor& extractor, const PatchSpec& patch) {
    return loss_final(j_hat, j, weights, &extractor, patch);
}

}  // namespace falcon
