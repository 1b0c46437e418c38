// Command-line front end for the dehazing engine.
//
// Subcommands: dehaze, density, train, bench, synth, inspect.
// Exit codes: 0 success, 2 bad arguments or unusable state, 3 file I/O or
// text-format failure, 4 malformed weight file, 1 unexpected internal error.
// FALCON_THREADS caps op-level parallelism for every subcommand (0 = auto).

#include <CLI11.hpp>

#include <falcon/bench.hpp>
#include <falcon/trainer.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace falcon;

int round_up(int v, int mult) { return (v + mult - 1) / mult * mult; }

// Replicates the bottom and right edges until both spatial dims are
// multiples of `mult`, so any input size survives the down/up path.
Tensor pad_to_multiple(const Tensor& x, int mult) {
    const Shape s = x.shape();
    const int ph = round_up(s.h, mult);
    const int pw = round_up(s.w, mult);
    if (ph == s.h && pw == s.w) return x;
    Tensor out = Tensor::zeros({s.n, s.c, ph, pw});
    const auto& in = x.data();
    auto& o = out.data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < ph; ++y) {
                const int sy = std::min(y, s.h - 1);
                for (int px = 0; px < pw; ++px) {
                    const int sx = std::min(px, s.w - 1);
                    o[std::size_t(((n * s.c + c) * ph + y) * pw + px)] =
                        in[std::size_t(((n * s.c + c) * s.h + sy) * s.w + sx)];
                }
            }
    return out;
}

Tensor crop_top_left(const Tensor& x, int h, int w) {
    const Shape s = x.shape();
    if (h > s.h || w > s.w) throw ParamError("crop exceeds tensor size");
    if (h == s.h && w == s.w) return x;
    Tensor out = Tensor::zeros({s.n, s.c, h, w});
    const auto& in = x.data();
    auto& o = out.data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < h; ++y)
                for (int px = 0; px < w; ++px)
                    o[std::size_t(((n * s.c + c) * h + y) * w + px)] =
                        in[std::size_t(((n * s.c + c) * s.h + y) * s.w + px)];
    return out;
}

PatchSpec make_patch(int patch_size) {
    PatchSpec spec;
    spec.patch_size = patch_size;
    spec.validate();
    return spec;
}

void run_dehaze(const std::string& in_path, const std::string& out_path,
                const std::string& weights_path, int patch_size, bool no_cdm) {
    PatchSpec patch = make_patch(patch_size);
    Falcon model = load_model(weights_path);
    Tensor x = image_to_tensor(decode_image(in_path));
    const Shape orig = x.shape();

    NoGradGuard guard;
    Tensor padded = pad_to_multiple(x, 1 << model.config.depth);
    const Shape ps = padded.shape();
    Tensor mask = no_cdm ? Tensor::zeros({1, 1, ps.h, ps.w}) : dark_channel(padded, patch);
    Tensor restored = model.forward(concat_cdm(padded, mask), Mode::eval);
    encode_image(tensor_to_image(crop_top_left(restored, orig.h, orig.w)), out_path);
    std::cout << "wrote " << out_path << " (" << orig.w << "x" << orig.h << ")\n";
}

void run_density(const std::string& in_path, const std::string& out_path, int patch_size) {
    PatchSpec patch = make_patch(patch_size);
    Tensor x = image_to_tensor(decode_image(in_path));
    NoGradGuard guard;
    Tensor mask = dark_channel(x, patch);
    encode_image(tensor_to_image(mask), out_path);
    const Shape s = mask.shape();
    std::cout << "wrote " << out_path << " (" << s.w << "x" << s.h << ")\n";
}

void run_train(const std::string& config_path, const std::string& data_dir,
               const std::string& out_path, const std::string& csv_path, bool toy,
               long long seed_override) {
    TrainConfig cfg = load_train_config(config_path);
    if (seed_override >= 0) {
        if (seed_override > 0xffffffffll) throw ParamError("--seed must fit in 32 bits");
        cfg.seed = static_cast<std::uint32_t>(seed_override);
    }
    Falcon model(toy ? FalconConfig::toy() : FalconConfig{});
    TrainReport report = train(model, cfg, data_dir, out_path, csv_path);

    const StepRecord& last = report.history.back();
    std::cout << "trained " << report.history.size() << " steps on " << data_dir << "\n"
              << std::setprecision(6) << "final losses: img=" << last.img
              << " per=" << last.perceptual << " map=" << last.map << " total=" << last.total
              << "\n";
    for (const std::string& ckpt : report.checkpoint_paths)
        std::cout << "checkpoint " << ckpt << "\n";
    std::cout << "wrote " << out_path << "\n";
}

void run_bench(const std::string& weights_path, const std::vector<int>& resolutions, int warmup,
               int runs, const std::string& csv_path, int patch_size, unsigned seed) {
    PatchSpec patch = make_patch(patch_size);
    Falcon model = load_model(weights_path);
    std::vector<BenchReport> reports;
    for (int r : resolutions) {
        reports.push_back(measure_fps(model, r, warmup, runs, patch, seed));
        std::cout << report_to_kv(reports.back()) << "\n";
    }
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw IoError("cannot open " + csv_path + " for writing");
        out << report_csv_header() << "\n";
        for (const BenchReport& r : reports) out << report_to_csv(r) << "\n";
        if (!out) throw IoError("short write to " + csv_path);
        std::cout << "wrote " << csv_path << "\n";
    }
}

void run_synth(const std::string& out_dir, unsigned seed, int train_pairs, int val_pairs,
               int size) {
    synth_corpus(out_dir, seed, train_pairs, val_pairs, size);
    std::cout << "wrote " << train_pairs << " train and " << val_pairs << " val pairs under "
              << out_dir << "\n";
}

void run_inspect(const std::string& weights_path) {
    ModelWeights weights = load_weights(weights_path);
    FalconConfig cfg = infer_config(weights);
    std::cout << "depth = " << cfg.depth << "\n"
              << "base_channels = " << cfg.base_channels << "\n"
              << "alpha_in = " << cfg.alpha_in << "\n";

    std::int64_t params = 0, buffers = 0;
    for (const auto& [name, tensor] : weights.entries) {
        const bool is_buffer = name.ends_with(".running_mean") ||
                               name.ends_with(".running_var") || name.ends_with(".batches");
        (is_buffer ? buffers : params) += tensor.numel();
    }
    std::cout << "tensors = " << weights.entries.size() << "\n"
              << "parameters = " << params << "\n"
              << "buffers = " << buffers << "\n\n";
    for (const auto& [name, tensor] : weights.entries) {
        const Shape s = tensor.shape();
        std::cout << std::left << std::setw(44) << name << " [" << s.n << ", " << s.c << ", "
                  << s.h << ", " << s.w << "]\n";
    }
}

// FALCON_THREADS applies before any subcommand runs; a malformed value is a
// usage error, not something to silently ignore.
void apply_thread_env() {
    const char* env = std::getenv("FALCON_THREADS");
    if (!env) return;
    auto parsed = detail::parse_double(env);
    if (!parsed || *parsed != std::floor(*parsed) || *parsed < 0 || *parsed > 1024)
        throw ParamError("FALCON_THREADS must be a non-negative integer, got '" +
                         std::string(env) + "'");
    set_thread_count(static_cast<int>(*parsed));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-image dehazing: density-guided U-Net with a spectral bottleneck"};
    app.require_subcommand(1);

    std::string dz_in, dz_out, dz_weights;
    int dz_patch = 15;
    bool dz_nocdm = false;
    CLI::App* dz = app.add_subcommand("dehaze", "restore a hazy image with trained weights");
    dz->add_option("--input", dz_in, "hazy input image (png or ppm)")->required();
    dz->add_option("--output", dz_out, "restored output png")->required();
    dz->add_option("--weights", dz_weights, "trained weight file")->required();
    dz->add_option("--patch", dz_patch, "density mask patch size (odd)");
    dz->add_flag("--no-cdm", dz_nocdm, "feed a zero density mask instead of the dark channel");
    dz->callback([&] { run_dehaze(dz_in, dz_out, dz_weights, dz_patch, dz_nocdm); });

    std::string de_in, de_out;
    int de_patch = 15;
    CLI::App* de = app.add_subcommand("density", "write the haze density mask as a grayscale png");
    de->add_option("--input", de_in, "input image (png or ppm)")->required();
    de->add_option("--output", de_out, "mask output png")->required();
    de->add_option("--patch", de_patch, "density mask patch size (odd)");
    de->callback([&] { run_density(de_in, de_out, de_patch); });

    std::string tr_config, tr_data, tr_out, tr_csv;
    bool tr_toy = false;
    long long tr_seed = -1;
    CLI::App* tr = app.add_subcommand("train", "train on a paired hazy/clear directory");
    tr->add_option("--config", tr_config, "training config file")->required();
    tr->add_option("--data", tr_data, "dataset dir containing hazy/ and clear/")->required();
    tr->add_option("--out", tr_out, "output weight file")->required();
    tr->add_option("--loss-csv", tr_csv, "optional per-step loss csv");
    tr->add_flag("--toy", tr_toy, "use the small 2-level preset instead of the full model");
    tr->add_option("--seed", tr_seed, "override the config seed");
    tr->callback([&] { run_train(tr_config, tr_data, tr_out, tr_csv, tr_toy, tr_seed); });

    std::string be_weights, be_csv;
    std::vector<int> be_res{256};
    int be_warmup = 5, be_runs = 30, be_patch = 15;
    unsigned be_seed = 0;
    CLI::App* be = app.add_subcommand("bench", "measure inference latency and throughput");
    be->add_option("--weights", be_weights, "trained weight file")->required();
    be->add_option("--resolution", be_res, "square input sizes to time (repeatable)");
    be->add_option("--warmup", be_warmup, "warmup runs (>= 5)");
    be->add_option("--runs", be_runs, "timed runs (>= 30)");
    be->add_option("--csv", be_csv, "optional csv output path");
    be->add_option("--patch", be_patch, "density mask patch size (odd)");
    be->add_option("--seed", be_seed, "seed for the synthetic input image");
    be->callback([&] { run_bench(be_weights, be_res, be_warmup, be_runs, be_csv, be_patch, be_seed); });

    std::string sy_out;
    unsigned sy_seed = 0;
    int sy_train = 16, sy_val = 4, sy_size = 64;
    CLI::App* sy = app.add_subcommand("synth", "generate a paired synthetic haze corpus");
    sy->add_option("--out", sy_out, "corpus root directory")->required();
    sy->add_option("--seed", sy_seed, "base seed (same seed regenerates identical files)");
    sy->add_option("--train-pairs", sy_train, "pairs under train/");
    sy->add_option("--val-pairs", sy_val, "pairs under val/");
    sy->add_option("--size", sy_size, "square image size");
    sy->callback([&] { run_synth(sy_out, sy_seed, sy_train, sy_val, sy_size); });

    std::string in_weights;
    CLI::App* in = app.add_subcommand("inspect", "list the tensors stored in a weight file");
    in->add_option("--weights", in_weights, "weight file to describe")->required();
    in->callback([&] { run_inspect(in_weights); });

    try {
        apply_thread_env();
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const WeightFormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
