#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "falcon/bench.hpp"
#include "oracles.hpp"

using falcon::BenchReport;
using falcon::Falcon;
using falcon::FalconConfig;
using falcon::FlopsBreakdown;
using falcon::FormatError;
using falcon::LatencyStats;
using falcon::ParamError;
using falcon::Shape;
using falcon::StateError;
using falcon::Tensor;

namespace {

Tensor random_tensor(Shape s, unsigned seed) {
    return Tensor::from_data(s, oracle::uniform(std::size_t(s.numel()), seed));
}

FalconConfig tiny_config() {
    FalconConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 4;
    return cfg;
}

// One train pass fills the normalization stats so eval forward is legal.
void warm_up(Falcon& model, int hw) {
    Tensor x = random_tensor({2, 4, hw, hw}, 17);
    model.forward(x, falcon::Mode::train);
}

BenchReport sample_report() {
    BenchReport r;
    r.resolution = 256;
    r.warmup_runs = 5;
    r.timed_runs = 31;
    r.mean_ms = 1.0 / 3.0;
    r.median_ms = 0.31007001002003;
    r.p95_ms = 0.77777777777777779;
    r.fps = 1000.0 / (1.0 / 3.0);
    r.flops_g = 55.87968000000001;
    r.params = 1234567;
    r.threads = 2;
    r.hardware = "Example CPU (R) 9999X @ 1.23GHz";
    return r;
}

}  // namespace

TEST(Flops, ConvFormulaMatchesClosedForm) {
    // 3x3, 64 -> 64 channels at 256^2: 2*64*64*9*65536.
    EXPECT_EQ(falcon::conv_flops(64, 64, 3, 256.0 * 256.0), 4831838208.0);
    // 2x2 stride-2 upsampling, 32 -> 16 channels from a 16^2 grid.
    EXPECT_EQ(falcon::tconv_flops(32, 16, 2, 256.0), 1048576.0);
    // 24 channels of a 16x16 transform: 5*256*8 per channel.
    EXPECT_EQ(falcon::fft_flops(24, 16, 16), 245760.0);
}

TEST(Flops, ToyPresetTotalMatchesHandCount) {
    // Hand-computed spreadsheet for depth 2, base 8, alpha 0.75, patch 15 at
    // 64x64 under the header conventions; every term is an exact integer
    // (the only log2 factors hit power-of-two grids), so equality is exact.
    FlopsBreakdown b = falcon::count_flops(FalconConfig::toy(), 64);
    EXPECT_EQ(b.total(), 55879680.0);
    EXPECT_EQ(b.find("density"), 925696.0);          // (15^2+1) * 64^2
    EXPECT_EQ(b.find("stem.conv"), 2359296.0);       // 2*8*4*9*64^2
    EXPECT_EQ(b.find("fal.ffcb.s1.rfft2"), 245760.0);
    EXPECT_EQ(b.find("fal.ffcb.s2.spectral.conv"), 663552.0);  // 2*48*48*144
    EXPECT_EQ(b.find("dec2.block.conv"), 9437184.0);
    EXPECT_EQ(b.find("clamp"), 24576.0);
}

TEST(Flops, DoublingResolutionQuadruplesSpatialItems) {
    FlopsBreakdown at64 = falcon::count_flops(FalconConfig::toy(), 64);
    FlopsBreakdown at128 = falcon::count_flops(FalconConfig::toy(), 128);
    EXPECT_EQ(at128.find("stem.conv"), 4.0 * at64.find("stem.conv"));
    EXPECT_EQ(at128.find("density"), 4.0 * at64.find("density"));
    EXPECT_EQ(at128.find("dec1.up.conv"), 4.0 * at64.find("dec1.up.conv"));
    // FFT items grow faster than 4x (the log factor), so totals may not.
    EXPECT_GT(at128.find("fal.ffcb.s1.rfft2"), 4.0 * at64.find("fal.ffcb.s1.rfft2"));
}

TEST(Flops, ZeroAlphaDropsSpectralItems) {
    FalconConfig cfg = tiny_config();
    cfg.alpha_in = 0.0f;
    FlopsBreakdown b = falcon::count_flops(cfg, 32);
    for (const auto& item : b.items) {
        EXPECT_EQ(item.label.find("rfft2"), std::string::npos) << item.label;
        EXPECT_EQ(item.label.find("spectral"), std::string::npos) << item.label;
    }
    EXPECT_GT(b.find("fal.ffcb.s1.local_to_local.conv"), 0.0);
}

TEST(Flops, InvalidResolutionRejected) {
    EXPECT_THROW(falcon::count_flops(FalconConfig::toy(), 30), ParamError);
    EXPECT_THROW(falcon::count_flops(FalconConfig::toy(), 0), ParamError);
    EXPECT_THROW(falcon::count_flops(FalconConfig::toy(), -64), ParamError);
}

TEST(Latency, SummaryArithmetic) {
    LatencyStats flat = falcon::summarize_latencies({10.0, 10.0, 10.0});
    EXPECT_EQ(flat.mean_ms, 10.0);
    EXPECT_EQ(flat.median_ms, 10.0);
    EXPECT_EQ(flat.p95_ms, 10.0);
    EXPECT_EQ(1000.0 / flat.mean_ms, 100.0);  // 10 ms mean is 100 FPS

    LatencyStats even = falcon::summarize_latencies({4.0, 1.0, 3.0, 2.0});
    EXPECT_EQ(even.median_ms, 2.5);

    std::vector<double> ramp;
    for (int i = 1; i <= 100; ++i) ramp.push_back(double(i));
    EXPECT_EQ(falcon::summarize_latencies(ramp).p95_ms, 95.0);

    EXPECT_THROW(falcon::summarize_latencies({}), ParamError);
}

TEST(Measure, ReportsConsistentNumbers) {
    Falcon model(tiny_config());
    warm_up(model, 32);
    BenchReport r = falcon::measure_fps(model, 32, 5, 30);
    EXPECT_EQ(r.resolution, 32);
    EXPECT_EQ(r.warmup_runs, 5);
    EXPECT_EQ(r.timed_runs, 30);
    EXPECT_GT(r.mean_ms, 0.0);
    EXPECT_NEAR(r.fps * r.mean_ms, 1000.0, 1e-6);
    EXPECT_LE(r.median_ms, r.p95_ms);
    EXPECT_EQ(r.params, model.param_count());
    EXPECT_EQ(r.flops_g, falcon::count_flops(model.config, 32).total() / 1e9);
    EXPECT_EQ(r.threads, falcon::thread_count());
    EXPECT_FALSE(r.hardware.empty());
}

TEST(Measure, MedianLatencyIsStableAcrossRuns) {
    Falcon model(tiny_config());
    warm_up(model, 32);
    BenchReport a = falcon::measure_fps(model, 32, 5, 30);
    BenchReport b = falcon::measure_fps(model, 32, 5, 30);
    double gap = std::abs(a.median_ms - b.median_ms);
    EXPECT_LT(gap, 0.2 * std::max(a.median_ms, b.median_ms))
        << a.median_ms << " vs " << b.median_ms;
}

TEST(Measure, ValidatesArguments) {
    Falcon model(tiny_config());
    warm_up(model, 32);
    EXPECT_THROW(falcon::measure_fps(model, 32, 4, 30), ParamError);
    EXPECT_THROW(falcon::measure_fps(model, 32, 5, 29), ParamError);
    EXPECT_THROW(falcon::measure_fps(model, 30, 5, 30), ParamError);
    EXPECT_THROW(falcon::measure_fps(model, 0, 5, 30), ParamError);
}

TEST(Measure, UntrainedModelCannotBeTimed) {
    Falcon model(tiny_config());
    EXPECT_THROW(falcon::measure_fps(model, 32, 5, 30), StateError);
}

TEST(Report, KvRoundTripIsLossless) {
    BenchReport r = sample_report();
    BenchReport back = falcon::report_from_kv(falcon::report_to_kv(r));
    EXPECT_EQ(back.resolution, r.resolution);
    EXPECT_EQ(back.warmup_runs, r.warmup_runs);
    EXPECT_EQ(back.timed_runs, r.timed_runs);
    EXPECT_EQ(back.mean_ms, r.mean_ms);
    EXPECT_EQ(back.median_ms, r.median_ms);
    EXPECT_EQ(back.p95_ms, r.p95_ms);
    EXPECT_EQ(back.fps, r.fps);
    EXPECT_EQ(back.flops_g, r.flops_g);
    EXPECT_EQ(back.params, r.params);
    EXPECT_EQ(back.threads, r.threads);
    EXPECT_EQ(back.hardware, r.hardware);
}

TEST(Report, KvRejectsUnknownAndMissingKeys) {
    EXPECT_THROW(falcon::report_from_kv("resolution = 64\nvoltage = 9\n"), FormatError);
    EXPECT_THROW(falcon::report_from_kv("resolution = 64\n"), FormatError);
    EXPECT_THROW(falcon::report_from_kv("resolution 64\n"), FormatError);
}

TEST(Report, CsvRoundTripIsLossless) {
    EXPECT_EQ(falcon::report_csv_header(),
              "resolution,mean_ms,median_ms,p95_ms,fps,flops_g,params");
    BenchReport r = sample_report();
    BenchReport back = falcon::report_from_csv(falcon::report_to_csv(r));
    EXPECT_EQ(back.resolution, r.resolution);
    EXPECT_EQ(back.mean_ms, r.mean_ms);
    EXPECT_EQ(back.median_ms, r.median_ms);
    EXPECT_EQ(back.p95_ms, r.p95_ms);
    EXPECT_EQ(back.fps, r.fps);
    EXPECT_EQ(back.flops_g, r.flops_g);
    EXPECT_EQ(back.params, r.params);
}

TEST(Report, CsvRejectsWrongColumnCount) {
    EXPECT_THROW(falcon::report_from_csv("1,2,3,4,5,6"), FormatError);
    EXPECT_THROW(falcon::report_from_csv("1,2,3,4,5,6,7,8"), FormatError);
    EXPECT_THROW(falcon::report_from_csv("a,2,3,4,5,6,7"), FormatError);
}

TEST(Report, RecordsTheActiveThreadCap) {
    Falcon model(tiny_config());
    warm_up(model, 32);
    falcon::set_thread_count(2);
    BenchReport r = falcon::measure_fps(model, 32, 5, 30);
    falcon::set_thread_count(1);
    EXPECT_EQ(r.threads, 2);
}
