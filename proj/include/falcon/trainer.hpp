// Toy-scale training loop: Adam over the dehazing network on paired corpora,
// with seeded flip/crop augmentation and a bounded prefetch queue.
#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "falcon/density.hpp"
#include "falcon/errors.hpp"
#include "falcon/image.hpp"
#include "falcon/losses.hpp"
#include "falcon/network.hpp"
#include "falcon/parse.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

struct TrainConfig {
    float learning_rate = 1e-4f;
    int batch_size = 5;
    int steps = 200;
    std::uint32_t seed = 0;
    int crop_size = 64;
    float flip_prob = 0.5f;
    LossWeights weights;
    PatchSpec patch;
    int checkpoint_every = 0;  // 0 disables intermediate checkpoints

    // `depth` is the downsampling depth of the network being trained.
    void validate(int depth) const {
        if (learning_rate <= 0.0f) throw ConfigError("learning rate must be positive");
        if (batch_size < 1)
            throw ConfigError("batch size must be >= 1, got " + std::to_string(batch_size));
        if (steps < 1) throw ConfigError("step count must be >= 1, got " + std::to_string(steps));
        if (crop_size < 1)
            throw ConfigError("crop size must be >= 1, got " + std::to_string(crop_size));
        int mult = 1 << depth;
        if (crop_size % mult != 0)
            throw ConfigError("crop size " + std::to_string(crop_size) +
                              " must be divisible by " + std::to_string(mult));
        if (!(flip_prob >= 0.0f && flip_prob <= 1.0f))
            throw ConfigError("flip probability must be in [0,1]");
        if (checkpoint_every < 0) throw ConfigError("checkpoint cadence must be >= 0");
        weights.validate();
        patch.validate();
    }
};

namespace detail {

inline double parse_number(const std::string& value, int line) {
    std::optional<double> d = parse_double(value);
    if (!d)
        throw ConfigError("config line " + std::to_string(line) + ": invalid number '" + value +
                          "'");
    return *d;
}

inline int parse_integer(const std::string& value, int line) {
    double d = parse_number(value, line);
    if (d != std::floor(d) || d < -2147483648.0 || d > 2147483647.0)
        throw ConfigError("config line " + std::to_string(line) + ": expected an integer, got '" +
                          value + "'");
    return int(d);
}

// splitmix64 finalizer: decorrelates (seed, step, slot) streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace detail

// One `key = value` per line; blank lines and lines starting with '#' are
// skipped; only the keys below are accepted.
inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string text = detail::trim(line);
        if (text.empty() || text[0] == '#') continue;
        std::size_t eq = text.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              " is not 'key = value': " + text);
        std::string key = detail::trim(text.substr(0, eq));
        std::string value = detail::trim(text.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(lineno) + " has an empty " +
                              (key.empty() ? "key" : "value"));
        if (key == "learning_rate") {
            cfg.learning_rate = float(detail::parse_number(value, lineno));
        } else if (key == "batch_size") {
            cfg.batch_size = detail::parse_integer(value, lineno);
        } else if (key == "steps") {
            cfg.steps = detail::parse_integer(value, lineno);
        } else if (key == "seed") {
            double d = detail::parse_number(value, lineno);
            if (d != std::floor(d) || d < 0.0 || d > 4294967295.0)
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": seed must be an integer in [0, 2^32)");
            cfg.seed = std::uint32_t(d);
        } else if (key == "crop_size") {
            cfg.crop_size = detail::parse_integer(value, lineno);
        } else if (key == "alpha") {
            cfg.weights.alpha = float(detail::parse_number(value, lineno));
        } else if (key == "beta") {
            cfg.weights.beta = float(detail::parse_number(value, lineno));
        } else if (key == "gamma") {
            cfg.weights.gamma = float(detail::parse_number(value, lineno));
        } else if (key == "patch_size") {
            cfg.patch.patch_size = detail::parse_integer(value, lineno);
        } else if (key == "checkpoint_every") {
            cfg.checkpoint_every = detail::parse_integer(value, lineno);
        } else {
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        }
    }
    return cfg;
}

// Moment buffers are kept in double so the update math rounds only once, at
// the weight store.
struct AdamState {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    std::int64_t step_count = 0;
    std::vector<std::vector<double>> m, v;

    bool initialized() const { return !m.empty(); }

    void init(const std::vector<ParamEntry>& params) {
        m.clear();
        v.clear();
        for (const ParamEntry& p : params) {
            std::size_t n = std::size_t(p.tensor.shape().numel());
            m.emplace_back(n, 0.0);
            v.emplace_back(n, 0.0);
        }
        step_count = 0;
    }
};

// Bias-corrected Adam update, in place. State is lazily sized on first use and
// must keep matching the parameter list afterwards.
inline void adam_step(const std::vector<ParamEntry>& params, AdamState& state, float lr) {
    if (lr <= 0.0f) throw ParamError("learning rate must be positive");
    if (!state.initialized()) state.init(params);
    if (state.m.size() != params.size())
        throw StateError("optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, update got " + std::to_string(params.size()));
    ++state.step_count;
    double b1 = double(state.beta1), b2 = double(state.beta2);
    double bc1 = 1.0 - std::pow(b1, double(state.step_count));
    double bc2 = 1.0 - std::pow(b2, double(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        std::vector<float>& w = t.data();
        const std::vector<float>& g = t.grad();
        if (g.size() != w.size())
            throw StateError("missing gradient for parameter " + params[i].name);
        std::vector<double>& m = state.m[i];
        std::vector<double>& v = state.v[i];
        if (m.size() != w.size())
            throw StateError("optimizer moments do not match parameter " + params[i].name);
        for (std::size_t k = 0; k < w.size(); ++k) {
            double grad = double(g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * grad;
            v[k] = b2 * v[k] + (1.0 - b2) * grad * grad;
            double mhat = m[k] / bc1;
            double vhat = v[k] / bc2;
            w[k] = float(double(w[k]) - double(lr) * mhat / (std::sqrt(vhat) + double(state.eps)));
        }
    }
}

struct AugmentDraw {
    bool flip = false;
    int y0 = 0, x0 = 0;
};

// One seeded decision per call: flip, then crop offsets in flipped coords.
inline AugmentDraw draw_augment(int h, int w, int crop_size, float flip_prob,
                                std::uint64_t seed) {
    if (crop_size < 1) throw ParamError("crop size must be >= 1");
    if (crop_size > h || crop_size > w)
        throw ParamError("crop size " + std::to_string(crop_size) + " exceeds image " +
                         std::to_string(h) + "x" + std::to_string(w));
    if (!(flip_prob >= 0.0f && flip_prob <= 1.0f))
        throw ParamError("flip probability must be in [0,1]");
    std::mt19937 rng(std::uint32_t(seed ^ (seed >> 32)));
    AugmentDraw d;
    d.flip = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng) < flip_prob;
    d.y0 = std::uniform_int_distribution<int>(0, h - crop_size)(rng);
    d.x0 = std::uniform_int_distribution<int>(0, w - crop_size)(rng);
    return d;
}

inline Tensor flip_horizontal(const Tensor& x) {
    const Shape& s = x.shape();
    Tensor out = Tensor::zeros(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx)
                    out.at(n, c, y, xx) = x.at(n, c, y, s.w - 1 - xx);
    return out;
}

inline Tensor crop_window(const Tensor& x, int y0, int x0, int size) {
    const Shape& s = x.shape();
    if (y0 < 0 || x0 < 0 || y0 + size > s.h || x0 + size > s.w)
        throw ParamError("crop window leaves the image: offset (" + std::to_string(y0) + "," +
                         std::to_string(x0) + ") size " + std::to_string(size) + " on " + s.str());
    Tensor out = Tensor::zeros({s.n, s.c, size, size});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < size; ++y)
                for (int xx = 0; xx < size; ++xx)
                    out.at(n, c, y, xx) = x.at(n, c, y0 + y, x0 + xx);
    return out;
}

inline Tensor apply_augment(const Tensor& x, const AugmentDraw& d, int crop_size) {
    Tensor t = d.flip ? flip_horizontal(x) : x;
    return crop_window(t, d.y0, d.x0, crop_size);
}

// Identical flip/crop for both images of a pair, deterministic per seed.
inline std::pair<Tensor, Tensor> augment(const Tensor& hazy, const Tensor& clear, int crop_size,
                                         float flip_prob, std::uint64_t seed) {
    const Shape& sh = hazy.shape();
    if (!(sh == clear.shape()))
        throw DimensionError("augment pair dimensions differ: " + sh.str() + " vs " +
                             clear.shape().str());
    AugmentDraw d = draw_augment(sh.h, sh.w, crop_size, flip_prob, seed);
    return {apply_augment(hazy, d, crop_size), apply_augment(clear, d, crop_size)};
}

// Blocking bounded FIFO; close() wakes everyone, pops drain, pushes fail.
template <typename T>
class BoundedQueue {
  public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
        if (capacity < 1) throw ParamError("queue capacity must be >= 1");
    }

    void push(T item) {
        std::unique_lock<std::mutex> lock(mu_);
        not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
        if (closed_) throw StateError("push on a closed queue");
        items_.push_back(std::move(item));
        not_empty_.notify_one();
    }

    std::optional<T> pop() {
        std::unique_lock<std::mutex> lock(mu_);
        not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T item = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return item;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mu_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

  private:
    std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> items_;
    std::size_t capacity_;
    bool closed_ = false;
};

struct SamplePair {
    std::string stem;
    Tensor hazy, clear;
};

// Loads <dir>/hazy and <dir>/clear, pairing files by stem, sorted by stem.
inline std::vector<SamplePair> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path hazy_dir = fs::path(dir) / "hazy";
    fs::path clear_dir = fs::path(dir) / "clear";
    if (!fs::is_directory(hazy_dir) || !fs::is_directory(clear_dir))
        throw IoError("dataset directory must contain hazy/ and clear/: " + dir);
    auto stems_of = [](const fs::path& d) {
        std::map<std::string, fs::path> out;
        for (const auto& entry : fs::directory_iterator(d)) {
            if (!entry.is_regular_file()) continue;
            std::string ext = entry.path().extension().string();
            if (ext == ".png" || ext == ".ppm") out[entry.path().stem().string()] = entry.path();
        }
        return out;
    };
    std::map<std::string, fs::path> hazy = stems_of(hazy_dir);
    std::map<std::string, fs::path> clear = stems_of(clear_dir);
    for (const auto& [stem, path] : hazy)
        if (!clear.count(stem)) throw ConfigError("unpaired hazy sample: " + stem);
    for (const auto& [stem, path] : clear)
        if (!hazy.count(stem)) throw ConfigError("unpaired clear sample: " + stem);
    if (hazy.empty()) throw ConfigError("dataset holds no image pairs: " + dir);
    std::vector<SamplePair> out;
    for (const auto& [stem, path] : hazy) {
        SamplePair s;
        s.stem = stem;
        s.hazy = image_to_tensor(decode_image(path.string()));
        s.clear = image_to_tensor(decode_image(clear[stem].string()));
        if (!(s.hazy.shape() == s.clear.shape()))
            throw DimensionError("pair " + stem + " dimensions differ: " + s.hazy.shape().str() +
                                 " vs " + s.clear.shape().str());
        out.push_back(std::move(s));
    }
    return out;
}

struct TrainBatch {
    int step = 0;
    Tensor hazy, clear;
};

namespace detail {

// Epoch-wise shuffles without replacement, concatenated to cover all steps.
inline std::vector<int> build_schedule(int sample_count, int steps, int batch_size,
                                       std::uint32_t seed) {
    std::size_t needed = std::size_t(steps) * std::size_t(batch_size);
    std::vector<int> order;
    order.reserve(needed + std::size_t(sample_count));
    int epoch = 0;
    while (order.size() < needed) {
        std::vector<int> idx(static_cast<std::size_t>(sample_count));
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937 rng(std::uint32_t(mix_seed(seed, 0x45504F43ull + std::uint64_t(epoch))));
        std::shuffle(idx.begin(), idx.end(), rng);
        order.insert(order.end(), idx.begin(), idx.end());
        ++epoch;
    }
    order.resize(needed);
    return order;
}

inline TrainBatch make_batch(const std::vector<SamplePair>& data, const std::vector<int>& schedule,
                             const TrainConfig& cfg, int step) {
    int cs = cfg.crop_size;
    TrainBatch batch;
    batch.step = step;
    batch.hazy = Tensor::zeros({cfg.batch_size, 3, cs, cs});
    batch.clear = Tensor::zeros({cfg.batch_size, 3, cs, cs});
    std::size_t block = std::size_t(3) * cs * cs;
    for (int slot = 0; slot < cfg.batch_size; ++slot) {
        const SamplePair& s =
            data[std::size_t(schedule[std::size_t(step) * cfg.batch_size + slot])];
        std::uint64_t aug_seed =
            mix_seed(mix_seed(cfg.seed, std::uint64_t(step) + 1), std::uint64_t(slot) + 1);
        auto [hz, cl] = augment(s.hazy, s.clear, cs, cfg.flip_prob, aug_seed);
        std::copy(hz.data().begin(), hz.data().end(), batch.hazy.data().begin() + slot * block);
        std::copy(cl.data().begin(), cl.data().end(), batch.clear.data().begin() + slot * block);
    }
    return batch;
}

inline std::string checkpoint_path(const std::string& out_path, int step) {
    std::string stem = out_path;
    const std::string ext = ".falw";
    if (stem.size() > ext.size() && stem.compare(stem.size() - ext.size(), ext.size(), ext) == 0)
        stem.resize(stem.size() - ext.size());
    return stem + "_step" + std::to_string(step) + ext;
}

}  // namespace detail

// One optimization step: density mask + concat off the tape, train forward,
// weighted loss, backward, Adam. Returns the loss breakdown with its graph.
inline LossBreakdown train_step(Falcon& model, AdamState& state, const TrainConfig& cfg,
                                const Tensor& hazy, const Tensor& clear,
                                const FeatureExtractor* extractor) {
    Tensor input;
    {
        NoGradGuard ng;
        Tensor mask = ddp(hazy, cfg.patch);
        input = concat_cdm(hazy, mask);
    }
    Tensor j_hat = model.forward(input, Mode::train);
    LossBreakdown losses = loss_final(j_hat, clear, cfg.weights, extractor, cfg.patch);
    if (!std::isfinite(losses.total_value()))
        throw StateError("non-finite loss at optimizer step " +
                         std::to_string(state.step_count + 1));
    model.zero_grad();
    losses.total.backward();
    adam_step(model.parameters(), state, cfg.learning_rate);
    return losses;
}

struct StepRecord {
    int step = 0;
    float img = 0.0f, perceptual = 0.0f, map = 0.0f, total = 0.0f;
};

struct TrainReport {
    std::vector<StepRecord> history;
    std::vector<std::string> checkpoint_paths;
};

namespace detail {

inline void write_loss_csv(const std::string& path, const std::vector<StepRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss curve: " + path);
    out << "step,loss_img,loss_per,loss_map,loss_total\n";
    out << std::setprecision(9);
    for (const StepRecord& r : history)
        out << r.step << ',' << r.img << ',' << r.perceptual << ',' << r.map << ',' << r.total
            << '\n';
    if (!out) throw IoError("short write on loss curve: " + path);
}

}  // namespace detail

// Full run: dataset load and validation up front, augmentation prefetched
// through a two-batch queue, checkpoints on cadence, final weights always
// written. Deterministic for a fixed (seed, config, corpus).
inline TrainReport train(Falcon& model, const TrainConfig& cfg, const std::string& dataset_dir,
                         const std::string& out_weights_path,
                         const std::string& loss_csv_path = "") {
    cfg.validate(model.config.depth);
    std::vector<SamplePair> data = load_dataset(dataset_dir);
    for (const SamplePair& s : data) {
        const Shape& sh = s.hazy.shape();
        if (cfg.crop_size > sh.h || cfg.crop_size > sh.w)
            throw ConfigError("crop size " + std::to_string(cfg.crop_size) + " exceeds sample " +
                              s.stem + " (" + sh.str() + ")");
    }
    std::optional<FeatureExtractor> extractor;
    if (cfg.weights.beta > 0.0f) extractor.emplace();

    std::vector<int> schedule =
        detail::build_schedule(int(data.size()), cfg.steps, cfg.batch_size, cfg.seed);
    BoundedQueue<TrainBatch> queue(2);
    std::exception_ptr producer_error;
    std::thread producer([&] {
        try {
            for (int step = 0; step < cfg.steps; ++step)
                queue.push(detail::make_batch(data, schedule, cfg, step));
        } catch (...) {
            producer_error = std::current_exception();
        }
        queue.close();
    });

    TrainReport report;
    AdamState state;
    try {
        for (int step = 0; step < cfg.steps; ++step) {
            std::optional<TrainBatch> batch = queue.pop();
            if (!batch) break;  // producer stopped early; its error is rethrown below
            LossBreakdown losses = train_step(model, state, cfg, batch->hazy, batch->clear,
                                              extractor ? &*extractor : nullptr);
            report.history.push_back({step + 1, losses.img_value(), losses.perceptual_value(),
                                      losses.map_value(), losses.total_value()});
            if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
                std::string path = detail::checkpoint_path(out_weights_path, step + 1);
                save_weights(export_weights(model), path);
                report.checkpoint_paths.push_back(path);
            }
        }
    } catch (...) {
        queue.close();
        producer.join();
        throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);

    save_weights(export_weights(model), out_weights_path);
    if (!loss_csv_path.empty()) detail::write_loss_csv(loss_csv_path, report.history);
    return report;
}

}  // namespace falcon
