// Drives the installed command-line binary as a subprocess and checks the
// exit-code contract: 0 success, 2 bad arguments, 3 I/O, 4 weight format.

#include <gtest/gtest.h>

#include <falcon/bench.hpp>
#include <falcon/trainer.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace falcon;

namespace {

struct CmdResult {
    int exit_code = -1;
    std::string output;
};

// Runs the CLI through sh, capturing stdout and stderr together. `env_prefix`
// lets a test export FALCON_THREADS for just that invocation.
CmdResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    std::string cmd = env_prefix + FALCON_CLI_PATH + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    CmdResult r;
    char buf[512];
    while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, n);
    int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("falcon_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    EXPECT_TRUE(in.good()) << path;
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

std::string tiny_train_config() {
    return "learning_rate = 0.001\nbatch_size = 2\nsteps = 3\nseed = 5\n"
           "crop_size = 16\nalpha = 1\nbeta = 0\ngamma = 1\npatch_size = 3\n";
}

// One trained toy-scale weight file shared by the dehaze/bench/inspect tests;
// training it once keeps the suite fast on a single core.
const fs::path& trained_weights() {
    static const fs::path path = [] {
        fs::path dir = scratch_dir("shared_weights");
        synth_corpus((dir / "corpus").string(), 3, 2, 0, 16);
        write_text(dir / "cfg.txt", tiny_train_config());
        fs::path weights = dir / "w.falw";
        CmdResult r = run_cli("train --toy --config " + (dir / "cfg.txt").string() + " --data " +
                              (dir / "corpus" / "train").string() + " --out " + weights.string());
        if (r.exit_code != 0) throw std::runtime_error("fixture train failed: " + r.output);
        return weights;
    }();
    return path;
}

}  // namespace

TEST(Help, TopLevelExitsZeroAndNamesSubcommands) {
    CmdResult r = run_cli("--help");
    EXPECT_EQ(r.exit_code, 0);
    for (const char* sub : {"dehaze", "density", "train", "bench", "synth", "inspect"})
        EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
}

TEST(Help, SubcommandHelpHasNoSideEffects) {
    fs::path dir = fs::temp_directory_path() / "falcon_cli_help_no_side_effects";
    fs::remove_all(dir);
    CmdResult r = run_cli("synth --help --out " + dir.string());
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.output.find("--seed"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir));
}

TEST(Args, NoSubcommandExitsTwo) {
    EXPECT_EQ(run_cli("").exit_code, 2);
}

TEST(Args, UnknownFlagExitsTwo) {
    EXPECT_EQ(run_cli("synth --out /tmp/x --frobnicate").exit_code, 2);
}

TEST(Args, MissingRequiredOptionExitsTwo) {
    CmdResult r = run_cli("density --input only_in.png");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("--output"), std::string::npos);
}

TEST(Synth, DefaultFlagsRegenerateTheCanonicalCorpus) {
    fs::path dir = scratch_dir("synth_canonical");
    fs::path lib_dir = dir / "lib";
    fs::path cli_dir = dir / "cli";
    synth_corpus(lib_dir.string(), 0);
    CmdResult r = run_cli("synth --out " + cli_dir.string());
    ASSERT_EQ(r.exit_code, 0) << r.output;

    int compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(lib_dir)) {
        if (!entry.is_regular_file()) continue;
        fs::path rel = fs::relative(entry.path(), lib_dir);
        EXPECT_EQ(read_bytes(entry.path()), read_bytes(cli_dir / rel)) << rel;
        ++compared;
    }
    EXPECT_EQ(compared, 40);
}

TEST(Synth, SameSeedIsByteStableAcrossRuns) {
    fs::path dir = scratch_dir("synth_stable");
    std::string flags = " --seed 7 --train-pairs 2 --val-pairs 1 --size 16";
    ASSERT_EQ(run_cli("synth --out " + (dir / "a").string() + flags).exit_code, 0);
    ASSERT_EQ(run_cli("synth --out " + (dir / "b").string() + flags).exit_code, 0);
    ASSERT_EQ(run_cli("synth --out " + (dir / "c").string() +
                      " --seed 8 --train-pairs 2 --val-pairs 1 --size 16")
                  .exit_code,
              0);
    fs::path rel = fs::path("train") / "hazy" / "0000.png";
    EXPECT_EQ(read_bytes(dir / "a" / rel), read_bytes(dir / "b" / rel));
    EXPECT_NE(read_bytes(dir / "a" / rel), read_bytes(dir / "c" / rel));
}

TEST(Density, OutputMatchesTheLibraryMask) {
    fs::path dir = scratch_dir("density_mask");
    ImageBuffer img = generate_clear_image(20, 14, 21);
    encode_image(img, (dir / "in.png").string());

    CmdResult r = run_cli("density --input " + (dir / "in.png").string() + " --output " +
                          (dir / "mask.png").string() + " --patch 3");
    ASSERT_EQ(r.exit_code, 0) << r.output;

    PatchSpec patch;
    patch.patch_size = 3;
    encode_image(tensor_to_image(dark_channel(image_to_tensor(img), patch)),
                 (dir / "oracle.png").string());
    EXPECT_EQ(read_bytes(dir / "mask.png"), read_bytes(dir / "oracle.png"));

    ImageBuffer mask = decode_image((dir / "mask.png").string());
    EXPECT_EQ(mask.width, 20);
    EXPECT_EQ(mask.height, 14);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            EXPECT_EQ(mask.at(y, x, 0), mask.at(y, x, 1));
            EXPECT_EQ(mask.at(y, x, 0), mask.at(y, x, 2));
        }
}

TEST(Density, EvenPatchExitsTwo) {
    fs::path dir = scratch_dir("density_patch");
    encode_image(generate_clear_image(8, 8, 1), (dir / "in.png").string());
    CmdResult r = run_cli("density --input " + (dir / "in.png").string() + " --output " +
                          (dir / "out.png").string() + " --patch 4");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("odd"), std::string::npos);
}

TEST(Density, MissingInputExitsThreeWithPath) {
    CmdResult r = run_cli("density --input /nonexistent/in.png --output /tmp/out.png");
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_NE(r.output.find("/nonexistent/in.png"), std::string::npos);
}

TEST(Train, TinyRunWritesLoadableWeightsAndCsv) {
    fs::path dir = scratch_dir("train_tiny");
    synth_corpus((dir / "corpus").string(), 9, 2, 0, 16);
    write_text(dir / "cfg.txt", tiny_train_config());

    CmdResult r = run_cli("train --toy --config " + (dir / "cfg.txt").string() + " --data " +
                          (dir / "corpus" / "train").string() + " --out " +
                          (dir / "w.falw").string() + " --loss-csv " + (dir / "loss.csv").string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("trained 3 steps"), std::string::npos);

    Falcon model = load_model((dir / "w.falw").string());
    EXPECT_EQ(model.config.depth, 2);
    EXPECT_EQ(model.config.base_channels, 8);

    std::ifstream csv(dir / "loss.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(csv, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], "step,loss_img,loss_per,loss_map,loss_total");
}

TEST(Train, SeedOverrideChangesTheRun) {
    fs::path dir = scratch_dir("train_seed");
    synth_corpus((dir / "corpus").string(), 9, 2, 0, 16);
    write_text(dir / "cfg.txt", tiny_train_config());
    std::string base = "train --toy --config " + (dir / "cfg.txt").string() + " --data " +
                       (dir / "corpus" / "train").string() + " --out ";

    ASSERT_EQ(run_cli(base + (dir / "a.falw").string()).exit_code, 0);
    ASSERT_EQ(run_cli(base + (dir / "b.falw").string() + " --seed 5").exit_code, 0);
    ASSERT_EQ(run_cli(base + (dir / "c.falw").string() + " --seed 11").exit_code, 0);

    EXPECT_EQ(read_bytes(dir / "a.falw"), read_bytes(dir / "b.falw"));
    EXPECT_NE(read_bytes(dir / "a.falw"), read_bytes(dir / "c.falw"));
}

TEST(Train, UnknownConfigKeyExitsTwo) {
    fs::path dir = scratch_dir("train_badcfg");
    synth_corpus((dir / "corpus").string(), 9, 2, 0, 16);
    write_text(dir / "cfg.txt", tiny_train_config() + "momentum = 0.9\n");
    CmdResult r = run_cli("train --toy --config " + (dir / "cfg.txt").string() + " --data " +
                          (dir / "corpus" / "train").string() + " --out " +
                          (dir / "w.falw").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("momentum"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "w.falw"));
}

TEST(Dehaze, PreservesOddInputDimensions) {
    fs::path dir = scratch_dir("dehaze_odd");
    encode_image(generate_clear_image(21, 19, 4), (dir / "in.png").string());

    CmdResult r = run_cli("dehaze --input " + (dir / "in.png").string() + " --output " +
                          (dir / "out.png").string() + " --weights " +
                          trained_weights().string() + " --patch 3");
    ASSERT_EQ(r.exit_code, 0) << r.output;

    ImageBuffer out = decode_image((dir / "out.png").string());
    EXPECT_EQ(out.width, 21);
    EXPECT_EQ(out.height, 19);
}

TEST(Dehaze, ZeroMaskFlagChangesTheOutput) {
    fs::path dir = scratch_dir("dehaze_nocdm");
    encode_image(generate_clear_image(16, 16, 4), (dir / "in.png").string());
    std::string base = "dehaze --input " + (dir / "in.png").string() + " --weights " +
                       trained_weights().string() + " --patch 3 --output ";

    ASSERT_EQ(run_cli(base + (dir / "cdm.png").string()).exit_code, 0);
    ASSERT_EQ(run_cli(base + (dir / "flat.png").string() + " --no-cdm").exit_code, 0);
    EXPECT_NE(read_bytes(dir / "cdm.png"), read_bytes(dir / "flat.png"));
}

TEST(Dehaze, MissingWeightsExitsThreeWithPath) {
    fs::path dir = scratch_dir("dehaze_noweights");
    encode_image(generate_clear_image(16, 16, 4), (dir / "in.png").string());
    CmdResult r = run_cli("dehaze --input " + (dir / "in.png").string() + " --output " +
                          (dir / "out.png").string() + " --weights /nonexistent/w.falw");
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_NE(r.output.find("/nonexistent/w.falw"), std::string::npos);
}

TEST(Dehaze, UntrainedWeightsExitTwo) {
    fs::path dir = scratch_dir("dehaze_untrained");
    Falcon model(FalconConfig::toy());
    save_weights(export_weights(model), (dir / "w.falw").string());
    encode_image(generate_clear_image(16, 16, 4), (dir / "in.png").string());
    CmdResult r = run_cli("dehaze --input " + (dir / "in.png").string() + " --output " +
                          (dir / "out.png").string() + " --weights " + (dir / "w.falw").string());
    EXPECT_EQ(r.exit_code, 2);
}

TEST(Inspect, ListsTensorsInSaveOrderWithCounts) {
    CmdResult r = run_cli("inspect --weights " + trained_weights().string());
    ASSERT_EQ(r.exit_code, 0) << r.output;

    Falcon model = load_model(trained_weights().string());
    EXPECT_NE(r.output.find("parameters = " + std::to_string(model.param_count())),
              std::string::npos);
    EXPECT_NE(r.output.find("depth = 2"), std::string::npos);
    EXPECT_NE(r.output.find("tensors = 112"), std::string::npos);

    std::size_t stem = r.output.find("stem.weight");
    std::size_t head = r.output.find("head.bias");
    ASSERT_NE(stem, std::string::npos);
    ASSERT_NE(head, std::string::npos);
    EXPECT_LT(stem, head);
    EXPECT_NE(r.output.find("[8, 4, 3, 3]"), std::string::npos);
}

TEST(Inspect, GarbageFileExitsFour) {
    fs::path dir = scratch_dir("inspect_garbage");
    write_text(dir / "bad.falw", "this is not a weight file");
    EXPECT_EQ(run_cli("inspect --weights " + (dir / "bad.falw").string()).exit_code, 4);
}

TEST(Bench, EmitsParsableKvAndCsv) {
    fs::path dir = scratch_dir("bench_kv");
    CmdResult r = run_cli("bench --weights " + trained_weights().string() +
                          " --resolution 16 --warmup 5 --runs 30 --patch 3 --csv " +
                          (dir / "bench.csv").string());
    ASSERT_EQ(r.exit_code, 0) << r.output;

    std::size_t cut = r.output.find("\nwrote ");
    ASSERT_NE(cut, std::string::npos);
    BenchReport kv = report_from_kv(r.output.substr(0, cut + 1));
    EXPECT_EQ(kv.resolution, 16);
    EXPECT_EQ(kv.timed_runs, 30);
    EXPECT_GT(kv.fps, 0.0);

    std::ifstream csv(dir / "bench.csv");
    std::string header, row;
    ASSERT_TRUE(std::getline(csv, header));
    ASSERT_TRUE(std::getline(csv, row));
    EXPECT_EQ(header, report_csv_header());
    BenchReport parsed = report_from_csv(row);
    EXPECT_EQ(parsed.resolution, 16);
    EXPECT_EQ(parsed.params, kv.params);
}

TEST(Bench, BadResolutionExitsTwo) {
    CmdResult r = run_cli("bench --weights " + trained_weights().string() + " --resolution 30");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("30"), std::string::npos);
}

TEST(Threads, EnvCapIsReportedByBench) {
    CmdResult r = run_cli("bench --weights " + trained_weights().string() +
                              " --resolution 16 --warmup 5 --runs 30 --patch 3",
                          "FALCON_THREADS=2 ");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("threads = 2"), std::string::npos);
}

TEST(Threads, InvalidEnvExitsTwo) {
    CmdResult r = run_cli("--help", "FALCON_THREADS=abc ");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("FALCON_THREADS"), std::string::npos);
}
