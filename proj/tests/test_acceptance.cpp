// Release gate: ten end-to-end checks with one PASS/FAIL line each.
// Tolerances and runtime budgets are pinned here, not in a config, so a
// regression cannot loosen them silently. Gates run in definition order.

#include <gtest/gtest.h>

#include <falcon/bench.hpp>
#include <falcon/trainer.hpp>

#include "oracles.hpp"
#include "ref_model.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace falcon;

namespace {

// Prints the verdict for one gate when the test body finishes; gtest's
// failure flag at that moment is the verdict.
struct GateLine {
    std::string label;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    explicit GateLine(std::string l) : label(std::move(l)) {}
    ~GateLine() {
        double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[gate] %s: %s (%.1f s)\n", label.c_str(),
                    ::testing::Test::HasFailure() ? "FAIL" : "PASS", s);
        std::fflush(stdout);
    }
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

Tensor random_tensor(Shape s, unsigned seed, bool requires_grad = false, float lo = 0.0f,
                     float hi = 1.0f) {
    return Tensor::from_data(s, oracle::uniform(std::size_t(s.numel()), seed, lo, hi),
                             requires_grad);
}

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("falcon_gate_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(FALCON_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void warm_up(Falcon& model, int hw) {
    Tensor x = random_tensor({2, 4, hw, hw}, 7);
    Tensor y = model.forward(x, Mode::train);
    (void)y;
}

}  // namespace

TEST(Gate, DensityPoolingMatchesBruteForceMinExactly) {
    GateLine line("1 density pooling equals brute-force nested min");
    for (unsigned seed = 0; seed < 100; ++seed) {
        Tensor x = random_tensor({1, 3, 16, 16}, seed);
        for (int patch : {1, 3, 5, 15}) {
            NoGradGuard ng;
            Tensor got = ddp(x, {patch});
            std::vector<float> want = oracle::dark_channel_ref(x.data(), 1, 3, 16, 16, patch);
            ASSERT_EQ(got.data().size(), want.size());
            for (std::size_t i = 0; i < want.size(); ++i)
                ASSERT_EQ(got.data()[i], want[i])
                    << "seed " << seed << " patch " << patch << " index " << i;
        }
    }
    EXPECT_LT(line.elapsed(), 10.0);
}

TEST(Gate, DensityPoolingGradientMatchesFiniteDifferences) {
    GateLine line("2 density pooling gradient matches central differences");
    const double eps = 1e-3;
    const int patches[4] = {1, 3, 5, 15};
    for (unsigned fixture = 0; fixture < 20; ++fixture) {
        // Shuffled distinct levels with spacing 2/767 > 2*eps: a +-eps nudge
        // never reorders any min, so the function is linear where probed.
        std::vector<float> levels = oracle::strict_levels(768, 100 + fixture, 0.0f, 2.0f);
        const int patch = patches[fixture % 4];

        Tensor x = Tensor::from_data({1, 3, 16, 16}, levels, true);
        sum_all(ddp(x, {patch})).backward();

        std::vector<float> data = levels;
        auto fd = oracle::central_diff(data, eps, [&]() {
            NoGradGuard ng;
            Tensor out = ddp(Tensor::from_data({1, 3, 16, 16}, data), {patch});
            double s = 0.0;
            for (float v : out.data()) s += v;
            return s;
        });
        oracle::GradCheck check = oracle::compare_grads(x.grad(), fd, 1e-6, 1e-3);
        EXPECT_TRUE(check.ok) << "fixture " << fixture << " patch " << patch << " index "
                              << check.worst_index << " analytic " << check.analytic
                              << " numeric " << check.numeric;
    }
    EXPECT_LT(line.elapsed(), 30.0);
}

TEST(Gate, SpectralRoundTripAndEnergyConservation) {
    GateLine line("3 spectral round trip and energy conservation");
    for (int size : {4, 8, 16, 32}) {
        Tensor x = random_tensor({1, 1, size, size}, 300 + unsigned(size), false, -1.0f, 1.0f);
        NoGradGuard ng;
        Tensor spec = rfft2(x);
        Tensor back = irfft2(spec, size, size);
        ASSERT_EQ(back.shape(), x.shape());
        for (std::size_t i = 0; i < x.data().size(); ++i)
            EXPECT_NEAR(back.data()[i], x.data()[i], 1e-5) << "size " << size << " index " << i;

        // Unnormalized half spectrum mirrored to the full grid carries the
        // time-domain energy times H*W.
        double time_energy = 0.0;
        for (float v : x.data()) time_energy += double(v) * v;
        int wh = size / 2 + 1;
        double freq_energy = 0.0;
        for (int y = 0; y < size; ++y)
            for (int xw = 0; xw < size; ++xw) {
                int sy = y, sx = xw;
                if (xw >= wh) {
                    sy = (size - y) % size;
                    sx = size - xw;
                }
                double re = spec.at(0, 0, sy, sx), im = spec.at(0, 1, sy, sx);
                freq_energy += re * re + im * im;
            }
        freq_energy /= double(size) * size;
        EXPECT_NEAR(freq_energy, time_energy, 1e-4 * std::abs(time_energy)) << "size " << size;
    }
    EXPECT_LT(line.elapsed(), 5.0);
}

TEST(Gate, EveryParameterGradientMatchesFiniteDifferences) {
    GateLine line("4 every parameter gradient matches finite differences");
    Falcon model(FalconConfig::toy());
    Tensor x = random_tensor({1, 4, 16, 16}, 4, true, 0.05f, 0.95f);
    Tensor tgt = random_tensor({1, 3, 16, 16}, 5, false, 0.05f, 0.95f);
    sse(model.forward(x, Mode::train), tgt).backward();

    // Double-precision mirror of the same function: finite differences on it
    // are clean at eps 1e-6, so the comparison isolates the f32 gradients.
    refmodel::RefFalcon ref = refmodel::RefFalcon::from(model);
    refmodel::Plane rx = refmodel::make(1, 4, 16, 16);
    std::copy(x.data().begin(), x.data().end(), rx.v.begin());
    refmodel::Plane rt = refmodel::make(1, 3, 16, 16);
    std::copy(tgt.data().begin(), tgt.data().end(), rt.v.begin());

    refmodel::Plane rout = ref.forward_train(rx);
    Tensor out = model.forward(x, Mode::train);
    ASSERT_EQ(rout.v.size(), out.data().size());
    for (std::size_t i = 0; i < rout.v.size(); ++i)
        ASSERT_NEAR(out.data()[i], rout.v[i], 1e-3) << "forward mismatch at " << i;

    const double eps = 1e-6;
    auto loss = [&]() { return refmodel::sse_loss(ref.forward_train(rx), rt); };

    long long checked = 0, failed = 0;
    for (auto& e : model.parameters()) {
        std::vector<float>& g = e.tensor.grad();
        std::vector<double>& rp = ref.p[e.name];
        ASSERT_EQ(g.size(), rp.size()) << e.name;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double keep = rp[i];
            rp[i] = keep + eps;
            double lp = loss();
            rp[i] = keep - eps;
            double lm = loss();
            rp[i] = keep;
            double fd = (lp - lm) / (2.0 * eps);
            double a = double(g[i]);
            ++checked;
            if (std::abs(a - fd) > 1e-3 + 1e-3 * std::max(std::abs(a), std::abs(fd))) {
                ++failed;
                if (failed <= 8)
                    ADD_FAILURE() << e.name << "[" << i << "] analytic " << a << " fd " << fd;
            }
        }
    }
    EXPECT_EQ(failed, 0) << "of " << checked << " parameters";
    EXPECT_EQ(checked, model.param_count());
    EXPECT_LT(line.elapsed(), 600.0);
}

TEST(Gate, FrequencyBlockSplitAndShapePreservation) {
    GateLine line("5 frequency block channel split and shape preservation");
    FfcbConfig split;
    split.channels = 64;
    split.alpha_in = 0.75f;
    EXPECT_EQ(split.local_channels(), 16);
    EXPECT_EQ(split.global_channels(), 48);

    std::mt19937 rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        std::uniform_int_distribution<int> cdist(2, 32), sdist(4, 12);
        int channels = cdist(rng);
        int global = std::uniform_int_distribution<int>(0, channels - 1)(rng);
        int h = sdist(rng), w = sdist(rng);

        FfcbConfig cfg;
        cfg.channels = channels;
        cfg.alpha_in = float(global) / float(channels);
        Ffcb block;
        block.init(cfg, rng, "gate");

        Tensor x = random_tensor({1, channels, h, w}, 500 + unsigned(trial), false, -1.0f, 1.0f);
        Tensor y = block.forward(x, Mode::train);
        EXPECT_EQ(y.shape(), x.shape()) << "trial " << trial << " channels " << channels
                                        << " global " << global << " size " << h << "x" << w;
    }
    EXPECT_LT(line.elapsed(), 5.0);
}

TEST(Gate, LossIdentitiesAndScalarOracles) {
    GateLine line("6 loss identities and scalar-loop oracles");
    FeatureExtractor extractor;
    PatchSpec patch{3};

    Tensor j = random_tensor({1, 3, 8, 8}, 600, false, 0.1f, 0.9f);
    Tensor j_same = Tensor::from_data(j.shape(), j.data());
    EXPECT_EQ(loss_img(j_same, j).data()[0], 0.0f);
    EXPECT_EQ(loss_perceptual(j_same, j, extractor).data()[0], 0.0f);
    EXPECT_EQ(loss_map(j_same, j, patch).data()[0], 0.0f);

    // Small perturbation keeps every term well under 1, so the absolute 1e-7
    // budget below exceeds the f32 accumulation error of the weighted sum.
    std::vector<float> shifted = j.data();
    std::mt19937 rng(601);
    std::uniform_real_distribution<float> nudge(-0.005f, 0.005f);
    for (float& v : shifted) v += nudge(rng);
    Tensor j_hat = Tensor::from_data(j.shape(), shifted);

    LossWeights weights;
    weights.alpha = 0.6f;
    weights.beta = 0.002f;
    weights.gamma = 0.9f;
    LossBreakdown parts = loss_final(j_hat, j, weights, extractor, patch);
    double expected = double(weights.alpha) * parts.img_value() +
                      double(weights.beta) * parts.perceptual_value() +
                      double(weights.gamma) * parts.map_value();
    ASSERT_LT(std::abs(expected), 0.5);
    EXPECT_NEAR(double(parts.total_value()), expected, 1e-7);

    double mse_ref = 0.0;
    for (std::size_t i = 0; i < shifted.size(); ++i) {
        double d = double(shifted[i]) - double(j.data()[i]);
        mse_ref += d * d;
    }
    mse_ref /= double(shifted.size());
    EXPECT_NEAR(double(loss_img(j_hat, j).data()[0]), mse_ref, 1e-6);

    Tensor f = random_tensor({1, 5, 6, 7}, 602, false, -1.0f, 1.0f);
    Tensor g = gram(f);
    const double norm = 1.0 / (5.0 * 6.0 * 7.0);
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < 5; ++k) {
            double acc = 0.0;
            for (int y = 0; y < 6; ++y)
                for (int xw = 0; xw < 7; ++xw)
                    acc += double(f.at(0, i, y, xw)) * double(f.at(0, k, y, xw));
            EXPECT_NEAR(double(g.at(0, 0, i, k)), acc * norm, 1e-6) << i << "," << k;
        }
    EXPECT_LT(line.elapsed(), 5.0);
}

TEST(Gate, TrainingHalvesThePixelLossDeterministically) {
    GateLine line("7 training halves the pixel loss, deterministically");
    fs::path dir = scratch_dir("train");
    synth_corpus(dir.string(), 0);

    TrainConfig cfg;
    cfg.learning_rate = 1e-4f;
    cfg.batch_size = 5;
    cfg.steps = 200;
    cfg.seed = 0;
    cfg.crop_size = 64;
    cfg.weights = {1.0f, 0.0f, 1.0f};
    cfg.patch.patch_size = 15;

    auto run = [&](const std::string& out) {
        Falcon model(FalconConfig::toy());
        return train(model, cfg, (dir / "train").string(), (dir / out).string());
    };
    TrainReport first = run("a.falw");
    ASSERT_EQ(first.history.size(), 200u);
    for (const StepRecord& r : first.history) {
        ASSERT_TRUE(std::isfinite(r.img)) << "step " << r.step;
        ASSERT_TRUE(std::isfinite(r.total)) << "step " << r.step;
    }
    float initial = first.history.front().img;
    float final_img = first.history.back().img;
    EXPECT_LT(final_img, 0.5f * initial) << "initial " << initial << " final " << final_img;

    TrainReport second = run("b.falw");
    std::ifstream fa(dir / "a.falw", std::ios::binary), fb(dir / "b.falw", std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), {});
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(ba, bb) << "same seed must give bit-identical weights";
    ASSERT_EQ(second.history.size(), first.history.size());
    for (std::size_t i = 0; i < first.history.size(); ++i)
        ASSERT_EQ(first.history[i].total, second.history[i].total) << "step " << i;
    EXPECT_LT(line.elapsed(), 900.0);
}

TEST(Gate, ThroughputFallsMonotonicallyWithResolution) {
    GateLine line("8 throughput falls monotonically with resolution");
    Falcon model(FalconConfig::toy());
    warm_up(model, 64);

    NoGradGuard ng;
    BenchReport r256 = measure_fps(model, 256, 5, 30);
    EXPECT_GE(r256.timed_runs, 30);
    EXPECT_GT(r256.fps, 0.0);
    BenchReport r512 = measure_fps(model, 512, 5, 30);
    BenchReport r1024 = measure_fps(model, 1024, 5, 30);

    // Larger inputs may never be more than 5% faster than smaller ones.
    EXPECT_LE(r512.fps, r256.fps * 1.05) << r256.fps << " -> " << r512.fps;
    EXPECT_LE(r1024.fps, r512.fps * 1.05) << r512.fps << " -> " << r1024.fps;
}

TEST(Gate, SerializationRoundTripsExactly) {
    GateLine line("9 serialization round trips exactly");
    fs::path dir = scratch_dir("serial");
    Falcon model(FalconConfig::toy());
    warm_up(model, 16);

    ModelWeights saved = export_weights(model);
    save_weights(saved, (dir / "w.falw").string());
    ModelWeights loaded = load_weights((dir / "w.falw").string());
    ASSERT_EQ(loaded.entries.size(), saved.entries.size());
    for (std::size_t i = 0; i < saved.entries.size(); ++i) {
        EXPECT_EQ(loaded.entries[i].first, saved.entries[i].first);
        const auto& a = saved.entries[i].second.data();
        const auto& b = loaded.entries[i].second.data();
        ASSERT_EQ(a.size(), b.size()) << saved.entries[i].first;
        EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)))
            << saved.entries[i].first;
    }

    BenchReport r;
    r.resolution = 256;
    r.warmup_runs = 5;
    r.timed_runs = 31;
    r.mean_ms = 1.0 / 3.0;
    r.median_ms = 2.0 / 7.0;
    r.p95_ms = 0.1 + 0.2;
    r.fps = 1000.0 / (1.0 / 3.0);
    r.flops_g = 55879680.0 / 1e9;
    r.params = 59219;
    r.threads = 1;
    r.hardware = "gate cpu";
    BenchReport back = report_from_csv(report_to_csv(r));
    EXPECT_EQ(back.resolution, r.resolution);
    auto bits = [](double v) {
        std::uint64_t u;
        std::memcpy(&u, &v, sizeof u);
        return u;
    };
    EXPECT_EQ(bits(back.mean_ms), bits(r.mean_ms));
    EXPECT_EQ(bits(back.median_ms), bits(r.median_ms));
    EXPECT_EQ(bits(back.p95_ms), bits(r.p95_ms));
    EXPECT_EQ(bits(back.fps), bits(r.fps));
    EXPECT_EQ(bits(back.flops_g), bits(r.flops_g));
    EXPECT_EQ(back.params, r.params);
    EXPECT_LT(line.elapsed(), 5.0);
}

TEST(Gate, PipelineSmokeRestoresDynamicRange) {
    GateLine line("10 synth, 50-step train, dehaze smoke");
    fs::path dir = scratch_dir("pipeline");
    ASSERT_EQ(run_cli("synth --out " + (dir / "corpus").string()), 0);

    std::ofstream cfg(dir / "cfg.txt");
    cfg << "learning_rate = 0.001\nbatch_size = 5\nsteps = 50\nseed = 0\n"
           "crop_size = 64\nalpha = 1\nbeta = 0\ngamma = 1\npatch_size = 15\n";
    cfg.close();
    ASSERT_EQ(run_cli("train --toy --config " + (dir / "cfg.txt").string() + " --data " +
                      (dir / "corpus" / "train").string() + " --out " + (dir / "w.falw").string()),
              0);

    fs::path hazy = dir / "corpus" / "val" / "hazy" / "0000.png";
    ASSERT_TRUE(fs::exists(hazy));
    ASSERT_EQ(run_cli("dehaze --input " + hazy.string() + " --output " + (dir / "out.png").string() +
                      " --weights " + (dir / "w.falw").string()),
              0);

    ImageBuffer in = decode_image(hazy.string());
    ImageBuffer out = decode_image((dir / "out.png").string());
    EXPECT_EQ(out.width, in.width);
    EXPECT_EQ(out.height, in.height);

    float lo = 1.0f, hi = 0.0f;
    for (float v : out.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    EXPECT_GT(hi - lo, 0.1f) << "range " << lo << " .. " << hi;
    EXPECT_LT(line.elapsed(), 300.0);
}
