// The dehazing generator: a U-Net whose bottleneck routes features through a
// frequency branch (split spatial/spectral paths, mixed twice), plus weight
// snapshotting and the binary weight-file codec.
#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "falcon/conv.hpp"
#include "falcon/errors.hpp"
#include "falcon/fft.hpp"
#include "falcon/norm.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

struct ParamEntry {
    std::string name;
    Tensor tensor;
};

struct StatsEntry {
    std::string name;  // prefix; expands to .running_mean/.running_var/.batches
    BnStats* stats;
};

namespace detail {

inline Tensor he_init(Shape s, std::mt19937& rng) {
    float fan_in = float(s.c) * s.h * s.w;
    return Tensor::randn(s, rng, std::sqrt(2.0f / fan_in), true);
}

}  // namespace detail

// 3x3 convolution (stride configurable, padding 1) + BN + ReLU.
struct ConvBlock {
    Tensor w, b, gamma, beta;
    BnStats stats;
    int stride = 1;

    void init(int cin, int cout, int stride_in, std::mt19937& rng, const std::string& label) {
        stride = stride_in;
        w = detail::he_init({cout, cin, 3, 3}, rng);
        b = Tensor::zeros({1, cout, 1, 1}, true);
        gamma = Tensor::full({1, cout, 1, 1}, 1.0f, true);
        beta = Tensor::zeros({1, cout, 1, 1}, true);
        stats.init(cout, label);
    }

    Tensor forward(const Tensor& x, Mode mode) {
        return relu(batch_norm(conv2d(x, w, b, stride, 1), gamma, beta, stats, mode));
    }

    void collect(const std::string& p, std::vector<ParamEntry>& params,
                 std::vector<StatsEntry>& st) {
        params.push_back({p + ".weight", w});
        params.push_back({p + ".bias", b});
        params.push_back({p + ".gamma", gamma});
        params.push_back({p + ".beta", beta});
        st.push_back({p, &stats});
    }
};

// Channel split for the frequency block: local share first, global second.
struct FfcbConfig {
    int channels = 64;
    float alpha_in = 0.75f;
    int spatial_kernel = 3;
    int spectral_kernel = 1;

    int global_channels() const {
        float g = alpha_in * float(channels);
        int gi = int(std::lround(g));
        if (std::abs(g - float(gi)) > 1e-4f)
            throw ConfigError("channel split " + std::to_string(alpha_in) + " of " +
                              std::to_string(channels) + " is not an integer partition");
        return gi;
    }
    int local_channels() const { return channels - global_channels(); }

    void validate() const {
        if (channels < 1) throw ConfigError("frequency block needs at least one channel");
        if (alpha_in < 0.0f || alpha_in > 1.0f)
            throw ConfigError("alpha_in must lie in [0,1], got " + std::to_string(alpha_in));
        if (spatial_kernel != 3 || spectral_kernel != 1)
            throw ConfigError("unsupported kernel configuration");
        if (channels - global_channels() < 1)
            throw ConfigError("local share of the split must keep at least one channel");
    }
};

// One mixing stage: four spatial convs plus the spectral transform, then
// BN+ReLU on each mixed half. With zero global channels only the
// local->local path exists and nothing touches the spectrum.
struct FfcbStage {
    int local = 0, global = 0;
    Tensor ll_w, ll_b;      // local -> local
    Tensor lg_w, lg_b;      // local -> global
    Tensor gl_w, gl_b;      // global -> local
    Tensor gg_w, gg_b;      // global -> global, ahead of the spectral transform
    Tensor spec_w, spec_b;  // 1x1 over stacked re/im spectrum channels
    Tensor local_gamma, local_beta;
    BnStats local_stats;
    Tensor global_gamma, global_beta;
    BnStats global_stats;
    Tensor spec_gamma, spec_beta;
    BnStats spec_stats;

    void init(int local_in, int global_in, std::mt19937& rng, const std::string& label) {
        local = local_in;
        global = global_in;
        ll_w = detail::he_init({local, local, 3, 3}, rng);
        ll_b = Tensor::zeros({1, local, 1, 1}, true);
        local_gamma = Tensor::full({1, local, 1, 1}, 1.0f, true);
        local_beta = Tensor::zeros({1, local, 1, 1}, true);
        local_stats.init(local, label + " local");
        if (global > 0) {
            lg_w = detail::he_init({global, local, 3, 3}, rng);
            lg_b = Tensor::zeros({1, global, 1, 1}, true);
            gl_w = detail::he_init({local, global, 3, 3}, rng);
            gl_b = Tensor::zeros({1, local, 1, 1}, true);
            gg_w = detail::he_init({global, global, 3, 3}, rng);
            gg_b = Tensor::zeros({1, global, 1, 1}, true);
            spec_w = detail::he_init({2 * global, 2 * global, 1, 1}, rng);
            spec_b = Tensor::zeros({1, 2 * global, 1, 1}, true);
            global_gamma = Tensor::full({1, global, 1, 1}, 1.0f, true);
            global_beta = Tensor::zeros({1, global, 1, 1}, true);
            global_stats.init(global, label + " global");
            spec_gamma = Tensor::full({1, 2 * global, 1, 1}, 1.0f, true);
            spec_beta = Tensor::zeros({1, 2 * global, 1, 1}, true);
            spec_stats.init(2 * global, label + " spectrum");
        }
    }

    // conv -> FFT -> 1x1 -> BN -> ReLU -> inverse FFT. `bypass_nonlinear`
    // drops BN+ReLU so the route is linear end to end (superposition tests).
    Tensor spectral(const Tensor& fg, Mode mode, bool bypass_nonlinear = false) {
        const Shape& s = fg.shape();
        Tensor pre = conv2d(fg, gg_w, gg_b, 1, 1);
        Tensor spec = conv2d(rfft2(pre), spec_w, spec_b, 1, 0);
        if (!bypass_nonlinear)
            spec = relu(batch_norm(spec, spec_gamma, spec_beta, spec_stats, mode));
        return irfft2(spec, int(s.h), int(s.w));
    }

    std::pair<Tensor, Tensor> forward(const Tensor& fl, const Tensor& fg, Mode mode) {
        Tensor to_local = conv2d(fl, ll_w, ll_b, 1, 1);
        if (global > 0) to_local = add(to_local, conv2d(fg, gl_w, gl_b, 1, 1));
        Tensor fl_mix =
            relu(batch_norm(to_local, local_gamma, local_beta, local_stats, mode));
        Tensor fg_mix;
        if (global > 0) {
            Tensor to_global = add(conv2d(fl, lg_w, lg_b, 1, 1), spectral(fg, mode));
            fg_mix = relu(batch_norm(to_global, global_gamma, global_beta, global_stats, mode));
        }
        return {fl_mix, fg_mix};
    }

    void collect(const std::string& p, std::vector<ParamEntry>& params,
                 std::vector<StatsEntry>& st) {
        params.push_back({p + ".local_to_local.weight", ll_w});
        params.push_back({p + ".local_to_local.bias", ll_b});
        params.push_back({p + ".local_bn.gamma", local_gamma});
        params.push_back({p + ".local_bn.beta", local_beta});
        st.push_back({p + ".local_bn", &local_stats});
        if (global > 0) {
            params.push_back({p + ".local_to_global.weight", lg_w});
            params.push_back({p + ".local_to_global.bias", lg_b});
            params.push_back({p + ".global_to_local.weight", gl_w});
            params.push_back({p + ".global_to_local.bias", gl_b});
            params.push_back({p + ".global_spatial.weight", gg_w});
            params.push_back({p + ".global_spatial.bias", gg_b});
            params.push_back({p + ".spectral.weight", spec_w});
            params.push_back({p + ".spectral.bias", spec_b});
            params.push_back({p + ".spec_bn.gamma", spec_gamma});
            params.push_back({p + ".spec_bn.beta", spec_beta});
            st.push_back({p + ".spec_bn", &spec_stats});
            params.push_back({p + ".global_bn.gamma", global_gamma});
            params.push_back({p + ".global_bn.beta", global_beta});
            st.push_back({p + ".global_bn", &global_stats});
        }
    }
};

// Two mixing stages over the split input; output rejoins both halves.
struct Ffcb {
    FfcbConfig cfg;
    FfcbStage s1, s2;

    void init(const FfcbConfig& cfg_in, std::mt19937& rng, const std::string& label) {
        cfg = cfg_in;
        cfg.validate();
        s1.init(cfg.local_channels(), cfg.global_channels(), rng, label + " s1");
        s2.init(cfg.local_channels(), cfg.global_channels(), rng, label + " s2");
    }

    Tensor forward(const Tensor& f, Mode mode) {
        const Shape& s = f.shape();
        if (s.c != cfg.channels)
            throw DimensionError("frequency block configured for " +
                                 std::to_string(cfg.channels) + " channels, got " + s.str());
        if (cfg.global_channels() == 0) {
            Tensor l1 = s1.forward(f, Tensor(), mode).first;
            return s2.forward(l1, Tensor(), mode).first;
        }
        auto halves = split_channels(f, {cfg.local_channels(), cfg.global_channels()});
        auto [l1, g1] = s1.forward(halves[0], halves[1], mode);
        auto [l2, g2] = s2.forward(l1, g1, mode);
        return concat_channels({l2, g2});
    }

    void collect(const std::string& p, std::vector<ParamEntry>& params,
                 std::vector<StatsEntry>& st) {
        s1.collect(p + ".s1", params, st);
        s2.collect(p + ".s2", params, st);
    }
};

// Bottleneck link: frequency block, conv block, residual around both.
struct Fal {
    Ffcb ffcb;
    ConvBlock block;

    void init(const FfcbConfig& cfg, std::mt19937& rng, const std::string& label) {
        ffcb.init(cfg, rng, label + " ffcb");
        block.init(cfg.channels, cfg.channels, 1, rng, label + " block");
    }

    Tensor forward(const Tensor& x, Mode mode) {
        return add(x, block.forward(ffcb.forward(x, mode), mode));
    }

    void collect(const std::string& p, std::vector<ParamEntry>& params,
                 std::vector<StatsEntry>& st) {
        ffcb.collect(p + ".ffcb", params, st);
        block.collect(p + ".block", params, st);
    }
};

struct FalconConfig {
    int depth = 4;
    int base_channels = 32;
    float alpha_in = 0.75f;
    unsigned seed = 0;

    int bottleneck_channels() const { return base_channels << depth; }

    void validate() const {
        if (depth < 1 || depth > 8) throw ConfigError("depth must be in [1,8]");
        if (base_channels < 2) throw ConfigError("base channels must be >= 2");
        FfcbConfig f;
        f.channels = bottleneck_channels();
        f.alpha_in = alpha_in;
        f.validate();
    }

    static FalconConfig toy() {
        FalconConfig c;
        c.depth = 2;
        c.base_channels = 8;
        return c;
    }
};

// Encoder/decoder U-Net around the frequency bottleneck. Input is the
// 4-channel image+density stack; output is a 3-channel image, clamped to
// [0,1] in eval mode only.
struct Falcon {
    FalconConfig config;
    ConvBlock stem;  // 4 -> base
    struct EncLevel {
        ConvBlock down;   // stride 2, C -> 2C
        ConvBlock block;  // 2C -> 2C
    };
    std::vector<EncLevel> enc;
    Fal fal;
    struct DecLevel {
        Tensor up_w, up_b;  // transpose conv k2 s2, C -> C/2
        ConvBlock block;    // C -> C/2 after skip concat
    };
    std::vector<DecLevel> dec;
    Tensor head_w, head_b;  // 1x1, base -> 3

    explicit Falcon(const FalconConfig& cfg) : config(cfg) {
        config.validate();
        std::mt19937 rng(config.seed);
        stem.init(4, config.base_channels, 1, rng, "stem");
        int c = config.base_channels;
        for (int i = 0; i < config.depth; ++i) {
            EncLevel lvl;
            lvl.down.init(c, 2 * c, 2, rng, "enc" + std::to_string(i + 1) + " down");
            lvl.block.init(2 * c, 2 * c, 1, rng, "enc" + std::to_string(i + 1) + " block");
            enc.push_back(std::move(lvl));
            c *= 2;
        }
        FfcbConfig fcfg;
        fcfg.channels = c;
        fcfg.alpha_in = config.alpha_in;
        fal.init(fcfg, rng, "fal");
        for (int i = 0; i < config.depth; ++i) {
            DecLevel lvl;
            lvl.up_w = detail::he_init({c, c / 2, 2, 2}, rng);
            lvl.up_b = Tensor::zeros({1, c / 2, 1, 1}, true);
            lvl.block.init(c, c / 2, 1, rng, "dec" + std::to_string(i + 1) + " block");
            dec.push_back(std::move(lvl));
            c /= 2;
        }
        head_w = detail::he_init({3, config.base_channels, 1, 1}, rng);
        head_b = Tensor::zeros({1, 3, 1, 1}, true);
    }

    Tensor forward(const Tensor& x, Mode mode) {
        const Shape& s = x.shape();
        if (s.c != 4)
            throw DimensionError("expected a 4-channel image+density input, got " + s.str());
        int div = 1 << config.depth;
        if (s.h % div != 0 || s.w % div != 0)
            throw DimensionError("spatial dims " + std::to_string(s.h) + "x" +
                                 std::to_string(s.w) + " must be divisible by " +
                                 std::to_string(div));
        Tensor cur = stem.forward(x, mode);
        std::vector<Tensor> skips;
        for (auto& lvl : enc) {
            skips.push_back(cur);
            cur = lvl.block.forward(lvl.down.forward(cur, mode), mode);
        }
        cur = fal.forward(cur, mode);
        for (std::size_t i = 0; i < dec.size(); ++i) {
            cur = transpose_conv2d(cur, dec[i].up_w, dec[i].up_b, 2);
            cur = concat_channels({cur, skips[skips.size() - 1 - i]});
            cur = dec[i].block.forward(cur, mode);
        }
        Tensor out = conv2d(cur, head_w, head_b, 1, 0);
        return mode == Mode::eval ? clamp01(out) : out;
    }

    std::vector<ParamEntry> parameters() {
        std::vector<ParamEntry> params;
        std::vector<StatsEntry> st;
        collect(params, st);
        return params;
    }

    std::vector<StatsEntry> stats_entries() {
        std::vector<ParamEntry> params;
        std::vector<StatsEntry> st;
        collect(params, st);
        return st;
    }

    void collect(std::vector<ParamEntry>& params, std::vector<StatsEntry>& st) {
        stem.collect("stem", params, st);
        for (std::size_t i = 0; i < enc.size(); ++i) {
            std::string p = "enc" + std::to_string(i + 1);
            enc[i].down.collect(p + ".down", params, st);
            enc[i].block.collect(p + ".block", params, st);
        }
        fal.collect("fal", params, st);
        for (std::size_t i = 0; i < dec.size(); ++i) {
            std::string p = "dec" + std::to_string(i + 1);
            params.push_back({p + ".up.weight", dec[i].up_w});
            params.push_back({p + ".up.bias", dec[i].up_b});
            dec[i].block.collect(p + ".block", params, st);
        }
        params.push_back({"head.weight", head_w});
        params.push_back({"head.bias", head_b});
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : parameters()) n += p.tensor.shape().numel();
        return n;
    }
};

// Ordered name -> tensor snapshot, including BN running stats and batch
// counters so a loaded model can run eval immediately.
struct ModelWeights {
    std::vector<std::pair<std::string, Tensor>> entries;

    const Tensor* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.first == name) return &e.second;
        return nullptr;
    }
};

inline ModelWeights export_weights(Falcon& model) {
    ModelWeights w;
    std::vector<ParamEntry> params;
    std::vector<StatsEntry> st;
    model.collect(params, st);
    for (auto& p : params) w.entries.push_back({p.name, p.tensor.clone()});
    for (auto& s : st) {
        int c = int(s.stats->running_mean.size());
        w.entries.push_back(
            {s.name + ".running_mean", Tensor::from_data({1, c, 1, 1}, s.stats->running_mean)});
        w.entries.push_back(
            {s.name + ".running_var", Tensor::from_data({1, c, 1, 1}, s.stats->running_var)});
        w.entries.push_back({s.name + ".batches",
                             Tensor::from_data({1, 1, 1, 1}, {float(s.stats->batches)})});
    }
    return w;
}

inline void import_weights(Falcon& model, const ModelWeights& weights) {
    std::vector<ParamEntry> params;
    std::vector<StatsEntry> st;
    model.collect(params, st);
    std::size_t expected = params.size() + st.size() * 3;
    if (weights.entries.size() != expected)
        throw WeightFormatError("weight file holds " + std::to_string(weights.entries.size()) +
                                    " tensors, architecture needs " + std::to_string(expected),
                                -1);
    auto fetch = [&](const std::string& name, Shape want) -> const Tensor& {
        const Tensor* t = weights.find(name);
        if (!t) throw WeightFormatError("missing tensor " + name, -1);
        if (!(t->shape() == want))
            throw WeightFormatError("tensor " + name + " has shape " + t->shape().str() +
                                        ", architecture needs " + want.str(),
                                    -1);
        return *t;
    };
    for (auto& p : params) {
        const Tensor& src = fetch(p.name, p.tensor.shape());
        std::copy(src.data().begin(), src.data().end(), p.tensor.data().begin());
    }
    for (auto& s : st) {
        int c = int(s.stats->running_mean.size());
        const Tensor& rm = fetch(s.name + ".running_mean", {1, c, 1, 1});
        const Tensor& rv = fetch(s.name + ".running_var", {1, c, 1, 1});
        const Tensor& nb = fetch(s.name + ".batches", {1, 1, 1, 1});
        std::copy(rm.data().begin(), rm.data().end(), s.stats->running_mean.begin());
        std::copy(rv.data().begin(), rv.data().end(), s.stats->running_var.begin());
        s.stats->batches = std::int64_t(nb.data()[0]);
    }
}

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back((unsigned char)(v & 0xff));
    out.push_back((unsigned char)(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((unsigned char)((v >> (8 * i)) & 0xff));
}

struct WeightReader {
    const std::vector<unsigned char>& bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw WeightFormatError(std::string("truncated weight file reading ") + what,
                                    (long long)pos);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = std::uint16_t(bytes[pos]) | (std::uint16_t(bytes[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace detail

// Binary layout: magic "FALW", version u16 = 1, tensor count u32; per tensor
// name length u16 + UTF-8 name, rank u8 (always 4 here), dims u32 each,
// payload little-endian f32 row-major. All integers little-endian.
inline void save_weights(const ModelWeights& weights, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), {'F', 'A', 'L', 'W'});
    detail::put_u16(out, 1);
    detail::put_u32(out, std::uint32_t(weights.entries.size()));
    for (const auto& [name, tensor] : weights.entries) {
        detail::put_u16(out, std::uint16_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(4);
        const Shape& s = tensor.shape();
        for (int d : {s.n, s.c, s.h, s.w}) detail::put_u32(out, std::uint32_t(d));
        static_assert(sizeof(float) == 4);
        std::size_t at = out.size();
        out.resize(at + tensor.data().size() * 4);
        std::memcpy(out.data() + at, tensor.data().data(), tensor.data().size() * 4);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw IoError("write failed for " + path);
}

inline ModelWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    detail::WeightReader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), "FALW", 4) != 0)
        throw WeightFormatError("bad magic, not a weight file", 0);
    r.pos = 4;
    std::uint16_t version = r.u16("version");
    if (version != 1)
        throw WeightFormatError("unsupported weight file version " + std::to_string(version), 4);
    std::uint32_t count = r.u32("tensor count");
    ModelWeights w;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = r.u16("name length");
        r.need(name_len, "name");
        std::string name(bytes.begin() + long(r.pos), bytes.begin() + long(r.pos + name_len));
        r.pos += name_len;
        if (w.find(name))
            throw WeightFormatError("duplicate tensor name " + name,
                                    (long long)(r.pos - name_len));
        r.need(1, "rank");
        int rank = bytes[r.pos++];
        if (rank != 4)
            throw WeightFormatError("unsupported tensor rank " + std::to_string(rank),
                                    (long long)(r.pos - 1));
        long long dims_at = (long long)r.pos;
        std::uint32_t n = r.u32("dims"), c = r.u32("dims"), h = r.u32("dims"), wd = r.u32("dims");
        std::int64_t numel = std::int64_t(n) * c * h * wd;
        if (numel <= 0 || numel > (std::int64_t(1) << 31))
            throw WeightFormatError("implausible tensor dims for " + name, dims_at);
        r.need(std::size_t(numel) * 4, "tensor payload");
        std::vector<float> data(static_cast<std::size_t>(numel));
        std::memcpy(data.data(), bytes.data() + r.pos, std::size_t(numel) * 4);
        r.pos += std::size_t(numel) * 4;
        w.entries.push_back(
            {name, Tensor::from_data({int(n), int(c), int(h), int(wd)}, std::move(data))});
    }
    if (r.pos != bytes.size())
        throw WeightFormatError("trailing bytes after last tensor", (long long)r.pos);
    return w;
}

// Recovers depth/base/alpha from tensor names and dims, so a weight file is
// sufficient to rebuild its network.
inline FalconConfig infer_config(const ModelWeights& weights) {
    const Tensor* stem = weights.find("stem.weight");
    if (!stem) throw WeightFormatError("weight file lacks stem.weight", -1);
    FalconConfig cfg;
    cfg.base_channels = stem->shape().n;
    int depth = 0;
    while (weights.find("enc" + std::to_string(depth + 1) + ".down.weight")) ++depth;
    if (depth == 0) throw WeightFormatError("weight file lacks encoder levels", -1);
    cfg.depth = depth;
    const Tensor* ll = weights.find("fal.ffcb.s1.local_to_local.weight");
    if (!ll) throw WeightFormatError("weight file lacks the bottleneck split conv", -1);
    int bottleneck = cfg.base_channels << depth;
    cfg.alpha_in = float(bottleneck - ll->shape().n) / float(bottleneck);
    return cfg;
}

inline Falcon load_model(const std::string& path) {
    ModelWeights w = load_weights(path);
    Falcon model(infer_config(w));
    import_weights(model, w);
    return model;
}

}  // namespace falcon
