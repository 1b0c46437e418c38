// Inference throughput harness: steady-clock latency over the full forward
// path (density mask + concat + network), plus analytic FLOPs accounting and
// lossless report serialization.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "falcon/density.hpp"
#include "falcon/errors.hpp"
#include "falcon/image.hpp"
#include "falcon/network.hpp"
#include "falcon/parse.hpp"

namespace falcon {

// Conventions, applied uniformly: convolutions cost two FLOPs per MAC with
// the bias counted as its own elementwise item; eval batch norm folds to one
// scale plus one shift (2/element); ReLU, residual adds and comparisons cost
// one each; clamp costs two; an FFT costs 5*HW*log2(HW) per channel.
inline double conv_flops(double cout, double cin, double kernel, double area_out) {
    return 2.0 * cout * cin * kernel * kernel * area_out;
}

// k x k stride-k upsampling: every input position scatters into k^2 outputs.
inline double tconv_flops(double cin, double cout, double kernel, double area_in) {
    return 2.0 * cin * cout * kernel * kernel * area_in;
}

inline double fft_flops(double channels, double h, double w) {
    return 5.0 * channels * h * w * std::log2(h * w);
}

struct FlopsItem {
    std::string label;
    double flops = 0.0;
};

struct FlopsBreakdown {
    std::vector<FlopsItem> items;

    double total() const {
        double sum = 0.0;
        for (const FlopsItem& it : items) sum += it.flops;
        return sum;
    }

    double find(const std::string& label) const {
        for (const FlopsItem& it : items)
            if (it.label == label) return it.flops;
        throw ParamError("no flops item labeled " + label);
    }
};

// Walks the same wiring as the forward pass in eval mode, one item per op.
inline FlopsBreakdown count_flops(const FalconConfig& cfg, int resolution,
                                  const PatchSpec& patch = {}) {
    cfg.validate();
    patch.validate();
    int mult = 1 << cfg.depth;
    if (resolution < mult || resolution % mult != 0)
        throw ParamError("resolution " + std::to_string(resolution) +
                         " must be a positive multiple of " + std::to_string(mult));
    FlopsBreakdown b;
    auto add = [&](const std::string& label, double v) { b.items.push_back({label, v}); };
    auto conv_block = [&](const std::string& label, double cin, double cout, double a) {
        add(label + ".conv", conv_flops(cout, cin, 3, a));
        add(label + ".bias", cout * a);
        add(label + ".bn", 2.0 * cout * a);
        add(label + ".relu", cout * a);
    };

    double area = double(resolution) * resolution;
    double p2 = double(patch.patch_size) * patch.patch_size;
    add("density", (2.0 + (p2 - 1.0)) * area);

    conv_block("stem", 4, cfg.base_channels, area);
    double c = cfg.base_channels, a = area;
    for (int i = 1; i <= cfg.depth; ++i) {
        a /= 4.0;
        conv_block("enc" + std::to_string(i) + ".down", c, 2.0 * c, a);
        conv_block("enc" + std::to_string(i) + ".block", 2.0 * c, 2.0 * c, a);
        c *= 2.0;
    }

    FfcbConfig fcfg;
    fcfg.channels = cfg.bottleneck_channels();
    fcfg.alpha_in = cfg.alpha_in;
    double g = fcfg.global_channels();
    double l = fcfg.local_channels();
    double r = double(resolution / mult);
    double r2 = r * r;
    double fa = r * (std::floor(r / 2.0) + 1.0);  // one-sided spectrum grid
    for (int s = 1; s <= 2; ++s) {
        std::string pre = "fal.ffcb.s" + std::to_string(s) + ".";
        add(pre + "local_to_local.conv", conv_flops(l, l, 3, r2));
        add(pre + "local_to_local.bias", l * r2);
        if (g > 0) {
            add(pre + "global_to_local.conv", conv_flops(l, g, 3, r2));
            add(pre + "global_to_local.bias", l * r2);
            add(pre + "local_mix.add", l * r2);
        }
        add(pre + "local_bn", 2.0 * l * r2);
        add(pre + "local_relu", l * r2);
        if (g > 0) {
            add(pre + "local_to_global.conv", conv_flops(g, l, 3, r2));
            add(pre + "local_to_global.bias", g * r2);
            add(pre + "global_spatial.conv", conv_flops(g, g, 3, r2));
            add(pre + "global_spatial.bias", g * r2);
            add(pre + "rfft2", fft_flops(g, r, r));
            add(pre + "spectral.conv", conv_flops(2.0 * g, 2.0 * g, 1, fa));
            add(pre + "spectral.bias", 2.0 * g * fa);
            add(pre + "spec_bn", 2.0 * (2.0 * g) * fa);
            add(pre + "spec_relu", 2.0 * g * fa);
            add(pre + "irfft2", fft_flops(g, r, r));
            add(pre + "global_mix.add", g * r2);
            add(pre + "global_bn", 2.0 * g * r2);
            add(pre + "global_relu", g * r2);
        }
    }
    double cb = cfg.bottleneck_channels();
    conv_block("fal.block", cb, cb, r2);
    add("fal.residual.add", cb * r2);

    c = cb;
    a = r2;
    for (int i = 1; i <= cfg.depth; ++i) {
        add("dec" + std::to_string(i) + ".up.conv", tconv_flops(c, c / 2.0, 2, a));
        add("dec" + std::to_string(i) + ".up.bias", (c / 2.0) * (a * 4.0));
        conv_block("dec" + std::to_string(i) + ".block", c, c / 2.0, a * 4.0);
        c /= 2.0;
        a *= 4.0;
    }

    add("head.conv", conv_flops(3, cfg.base_channels, 1, area));
    add("head.bias", 3.0 * area);
    add("clamp", 2.0 * 3.0 * area);
    return b;
}

struct LatencyStats {
    double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0;
};

// Nearest-rank p95 on a sorted copy.
inline LatencyStats summarize_latencies(std::vector<double> ms) {
    if (ms.empty()) throw ParamError("no latency samples");
    std::sort(ms.begin(), ms.end());
    std::size_t n = ms.size();
    LatencyStats s;
    s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / double(n);
    s.median_ms = n % 2 == 1 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    std::size_t rank = std::size_t(std::ceil(0.95 * double(n)));
    s.p95_ms = ms[rank - 1];
    return s;
}

inline std::string hardware_description() {
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) != 0) continue;
        std::size_t colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string name = detail::trim(line.substr(colon + 1));
        if (!name.empty()) return name;
    }
    return "unknown cpu";
}

struct BenchReport {
    int resolution = 0;
    int warmup_runs = 0;
    int timed_runs = 0;
    double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0;
    double fps = 0.0;
    double flops_g = 0.0;
    std::int64_t params = 0;
    int threads = 1;
    std::string hardware;
};

// Times density mask + concat + eval forward at batch 1 on a seeded synthetic
// image. The input tensor is built before the timed region; the tape is off.
inline BenchReport measure_fps(Falcon& model, int resolution, int warmup, int runs,
                               const PatchSpec& patch = {}, unsigned seed = 0) {
    if (warmup < 5) throw ParamError("warmup runs must be >= 5, got " + std::to_string(warmup));
    if (runs < 30) throw ParamError("timed runs must be >= 30, got " + std::to_string(runs));
    int mult = 1 << model.config.depth;
    if (resolution < mult || resolution % mult != 0)
        throw ParamError("resolution " + std::to_string(resolution) +
                         " must be a positive multiple of " + std::to_string(mult));
    patch.validate();

    Tensor input = image_to_tensor(generate_clear_image(resolution, resolution, seed));
    NoGradGuard ng;
    auto run_once = [&] {
        Tensor mask = dark_channel(input, patch);
        Tensor x = concat_cdm(input, mask);
        return model.forward(x, Mode::eval);
    };
    for (int i = 0; i < warmup; ++i) run_once();

    std::vector<double> ms;
    ms.reserve(std::size_t(runs));
    for (int i = 0; i < runs; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        run_once();
        auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    LatencyStats stats = summarize_latencies(std::move(ms));
    BenchReport r;
    r.resolution = resolution;
    r.warmup_runs = warmup;
    r.timed_runs = runs;
    r.mean_ms = stats.mean_ms;
    r.median_ms = stats.median_ms;
    r.p95_ms = stats.p95_ms;
    r.fps = 1000.0 / stats.mean_ms;
    r.flops_g = count_flops(model.config, resolution, patch).total() / 1e9;
    r.params = model.param_count();
    r.threads = thread_count();
    r.hardware = hardware_description();
    return r;
}

namespace detail {

// max_digits10 so every double survives the text round trip bit-exactly.
inline std::string fmt_double(double v) {
    std::ostringstream out;
    out << std::setprecision(17) << v;
    return out.str();
}

inline double parse_report_number(const std::string& value, const std::string& where) {
    std::optional<double> d = parse_double(value);
    if (!d) throw FormatError("invalid number '" + value + "' in " + where, -1);
    return *d;
}

}  // namespace detail

inline std::string report_to_kv(const BenchReport& r) {
    std::ostringstream out;
    out << "resolution = " << r.resolution << '\n';
    out << "warmup_runs = " << r.warmup_runs << '\n';
    out << "timed_runs = " << r.timed_runs << '\n';
    out << "mean_ms = " << detail::fmt_double(r.mean_ms) << '\n';
    out << "median_ms = " << detail::fmt_double(r.median_ms) << '\n';
    out << "p95_ms = " << detail::fmt_double(r.p95_ms) << '\n';
    out << "fps = " << detail::fmt_double(r.fps) << '\n';
    out << "flops_g = " << detail::fmt_double(r.flops_g) << '\n';
    out << "params = " << r.params << '\n';
    out << "threads = " << r.threads << '\n';
    out << "hardware = " << r.hardware << '\n';
    return out.str();
}

inline BenchReport report_from_kv(const std::string& text) {
    BenchReport r;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    unsigned seen = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw FormatError("report line " + std::to_string(lineno) + " is not 'key = value'",
                              -1);
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        std::string where = "report key " + key;
        if (key == "resolution") {
            r.resolution = int(detail::parse_report_number(value, where));
            seen |= 1u << 0;
        } else if (key == "warmup_runs") {
            r.warmup_runs = int(detail::parse_report_number(value, where));
            seen |= 1u << 1;
        } else if (key == "timed_runs") {
            r.timed_runs = int(detail::parse_report_number(value, where));
            seen |= 1u << 2;
        } else if (key == "mean_ms") {
            r.mean_ms = detail::parse_report_number(value, where);
            seen |= 1u << 3;
        } else if (key == "median_ms") {
            r.median_ms = detail::parse_report_number(value, where);
            seen |= 1u << 4;
        } else if (key == "p95_ms") {
            r.p95_ms = detail::parse_report_number(value, where);
            seen |= 1u << 5;
        } else if (key == "fps") {
            r.fps = detail::parse_report_number(value, where);
            seen |= 1u << 6;
        } else if (key == "flops_g") {
            r.flops_g = detail::parse_report_number(value, where);
            seen |= 1u << 7;
        } else if (key == "params") {
            r.params = std::int64_t(detail::parse_report_number(value, where));
            seen |= 1u << 8;
        } else if (key == "threads") {
            r.threads = int(detail::parse_report_number(value, where));
            seen |= 1u << 9;
        } else if (key == "hardware") {
            r.hardware = value;
            seen |= 1u << 10;
        } else {
            throw FormatError("unknown report key '" + key + "'", -1);
        }
    }
    if (seen != (1u << 11) - 1) throw FormatError("report is missing required keys", -1);
    return r;
}

inline std::string report_csv_header() {
    return "resolution,mean_ms,median_ms,p95_ms,fps,flops_g,params";
}

inline std::string report_to_csv(const BenchReport& r) {
    std::ostringstream out;
    out << r.resolution << ',' << detail::fmt_double(r.mean_ms) << ','
        << detail::fmt_double(r.median_ms) << ',' << detail::fmt_double(r.p95_ms) << ','
        << detail::fmt_double(r.fps) << ',' << detail::fmt_double(r.flops_g) << ',' << r.params;
    return out.str();
}

// Parses one CSV data row; fields outside the seven columns keep defaults.
inline BenchReport report_from_csv(const std::string& row) {
    std::vector<std::string> fields;
    std::string cur;
    std::istringstream in(row);
    while (std::getline(in, cur, ',')) fields.push_back(detail::trim(cur));
    if (fields.size() != 7)
        throw FormatError("csv row has " + std::to_string(fields.size()) + " fields, expected 7",
                          -1);
    BenchReport r;
    r.resolution = int(detail::parse_report_number(fields[0], "csv resolution"));
    r.mean_ms = detail::parse_report_number(fields[1], "csv mean_ms");
    r.median_ms = detail::parse_report_number(fields[2], "csv median_ms");
    r.p95_ms = detail::parse_report_number(fields[3], "csv p95_ms");
    r.fps = detail::parse_report_number(fields[4], "csv fps");
    r.flops_g = detail::parse_report_number(fields[5], "csv flops_g");
    r.params = std::int64_t(detail::parse_report_number(fields[6], "csv params"));
    return r;
}

}  // namespace falcon
