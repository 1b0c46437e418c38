// Image decode/encode (8-bit PNG and binary PPM), synthetic haze generation
// via the scattering model, and float-image helpers.
#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "falcon/errors.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

// Row-major HWC float image, values in [0,1].
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<float> values;

    float at(int y, int x, int c) const {
        return values[(std::size_t(y) * width + x) * channels + c];
    }
    float& at(int y, int x, int c) {
        return values[(std::size_t(y) * width + x) * channels + c];
    }
};

// Scattering parameters: global atmospheric light A in (0,1] and a per-pixel
// transmission field with values strictly inside (0,1).
struct HazeParams {
    float A = 1.0f;
    std::vector<float> t_field;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for " + path);
    return bytes;
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + path);
}

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void push_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back((unsigned char)(v >> 24));
    out.push_back((unsigned char)(v >> 16));
    out.push_back((unsigned char)(v >> 8));
    out.push_back((unsigned char)v);
}

inline unsigned char to_byte(float v) {
    float scaled = std::clamp(v, 0.0f, 1.0f) * 255.0f;
    return (unsigned char)std::lrint(std::nearbyint(scaled));
}

constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

inline std::vector<unsigned char> zlib_inflate(const std::vector<unsigned char>& in,
                                               std::size_t expected, long long err_offset) {
    std::vector<unsigned char> out(expected);
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw Error("inflate init failed");
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = uInt(in.size());
    zs.next_out = out.data();
    zs.avail_out = uInt(out.size());
    int rc = inflate(&zs, Z_FINISH);
    bool complete = rc == Z_STREAM_END && zs.avail_out == 0;
    inflateEnd(&zs);
    if (!complete) throw FormatError("corrupt or truncated compressed image data", err_offset);
    return out;
}

inline std::vector<unsigned char> zlib_deflate(const std::vector<unsigned char>& in) {
    uLongf cap = compressBound(uLong(in.size()));
    std::vector<unsigned char> out(cap);
    // Fixed level keeps encoded bytes reproducible across runs.
    if (compress2(out.data(), &cap, in.data(), uLong(in.size()), 6) != Z_OK)
        throw Error("deflate failed");
    out.resize(cap);
    return out;
}

inline ImageBuffer decode_png(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw FormatError("bad PNG signature", 0);
    std::size_t pos = 8;
    bool have_header = false;
    int width = 0, height = 0, color_type = 0;
    std::vector<unsigned char> idat;
    long long idat_offset = 0;
    bool done = false;
    while (!done) {
        if (pos + 8 > bytes.size()) throw FormatError("truncated PNG chunk header", (long long)pos);
        std::uint32_t len = be32(&bytes[pos]);
        const unsigned char* type = &bytes[pos + 4];
        if (pos + 12 + len > bytes.size())
            throw FormatError("truncated PNG chunk payload", (long long)pos);
        const unsigned char* data = &bytes[pos + 8];
        std::uint32_t want_crc = be32(&bytes[pos + 8 + len]);
        std::uint32_t got_crc =
            std::uint32_t(crc32(crc32(0, type, 4), len ? data : type, len ? len : 0));
        if (want_crc != got_crc)
            throw FormatError("PNG chunk CRC mismatch", (long long)(pos + 8 + len));
        std::string name(reinterpret_cast<const char*>(type), 4);
        if (name == "IHDR") {
            if (len != 13) throw FormatError("bad IHDR length", (long long)pos);
            width = int(be32(data));
            height = int(be32(data + 4));
            int bit_depth = data[8];
            color_type = data[9];
            int interlace = data[12];
            if (width <= 0 || height <= 0)
                throw FormatError("bad PNG dimensions", (long long)(pos + 8));
            if (bit_depth != 8)
                throw FormatError("unsupported PNG bit depth", (long long)(pos + 16));
            if (color_type != 0 && color_type != 2)
                throw FormatError("unsupported PNG color type", (long long)(pos + 17));
            if (interlace != 0)
                throw FormatError("interlaced PNG is unsupported", (long long)(pos + 20));
            have_header = true;
        } else if (name == "IDAT") {
            if (!have_header) throw FormatError("IDAT before IHDR", (long long)pos);
            if (idat.empty()) idat_offset = (long long)pos;
            idat.insert(idat.end(), data, data + len);
        } else if (name == "IEND") {
            done = true;
        }
        pos += 12 + len;
        if (!done && pos >= bytes.size()) throw FormatError("missing IEND", (long long)pos);
    }
    if (!have_header) throw FormatError("missing IHDR", 8);
    if (idat.empty()) throw FormatError("missing IDAT", (long long)pos);

    int src_ch = color_type == 2 ? 3 : 1;
    std::size_t stride = std::size_t(width) * src_ch;
    auto raw = zlib_inflate(idat, (stride + 1) * height, idat_offset);

    ImageBuffer img;
    img.width = width;
    img.height = height;
    img.channels = 3;
    img.values.resize(std::size_t(width) * height * 3);
    std::vector<unsigned char> prev(stride, 0), cur(stride);
    for (int y = 0; y < height; ++y) {
        const unsigned char* line = &raw[std::size_t(y) * (stride + 1)];
        int filter = line[0];
        if (filter > 4)
            throw FormatError("bad PNG filter type", idat_offset);
        for (std::size_t i = 0; i < stride; ++i) {
            int x = line[1 + i];
            int a = i >= std::size_t(src_ch) ? cur[i - src_ch] : 0;
            int b = prev[i];
            int c = i >= std::size_t(src_ch) ? prev[i - src_ch] : 0;
            switch (filter) {
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: break;
            }
            cur[i] = (unsigned char)(x & 0xff);
        }
        for (int xp = 0; xp < width; ++xp)
            for (int ch = 0; ch < 3; ++ch) {
                unsigned char v = cur[std::size_t(xp) * src_ch + (src_ch == 3 ? ch : 0)];
                img.at(y, xp, ch) = float(v) / 255.0f;
            }
        std::swap(prev, cur);
    }
    return img;
}

inline std::vector<unsigned char> encode_png(const ImageBuffer& img) {
    std::size_t stride = std::size_t(img.width) * 3;
    std::vector<unsigned char> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        unsigned char* line = &raw[std::size_t(y) * (stride + 1)];
        line[0] = 0;  // filter: none, keeps the byte stream trivially reproducible
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) line[1 + std::size_t(x) * 3 + c] = to_byte(img.at(y, x, c));
    }
    auto compressed = zlib_deflate(raw);

    std::vector<unsigned char> out(kPngSig, kPngSig + 8);
    auto chunk = [&out](const char* type, const std::vector<unsigned char>& data) {
        push_be32(out, std::uint32_t(data.size()));
        std::size_t type_at = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        std::uint32_t crc = std::uint32_t(
            crc32(0, out.data() + type_at, uInt(4 + data.size())));
        push_be32(out, crc);
    };
    std::vector<unsigned char> ihdr;
    push_be32(ihdr, std::uint32_t(img.width));
    push_be32(ihdr, std::uint32_t(img.height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // depth, RGB, deflate, adaptive, no interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", compressed);
    chunk("IEND", {});
    return out;
}

// Binary PPM header tokens: whitespace separated, '#' starts a comment.
inline std::string ppm_token(const std::vector<unsigned char>& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (std::isspace(bytes[pos])) {
            ++pos;
        } else if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') ++pos;
    if (start == pos) throw FormatError("truncated PPM header", (long long)start);
    return std::string(bytes.begin() + start, bytes.begin() + pos);
}

inline ImageBuffer decode_ppm(const std::vector<unsigned char>& bytes) {
    std::size_t pos = 0;
    if (ppm_token(bytes, pos) != "P6") throw FormatError("not a P6 PPM", 0);
    int width = 0, height = 0, maxval = 0;
    try {
        std::size_t tok_at = pos;
        width = std::stoi(ppm_token(bytes, pos));
        height = std::stoi(ppm_token(bytes, pos));
        tok_at = pos;
        while (tok_at < bytes.size() && std::isspace(bytes[tok_at])) ++tok_at;
        maxval = std::stoi(ppm_token(bytes, pos));
        if (maxval != 255) throw FormatError("unsupported PPM maxval", (long long)tok_at);
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception&) {
        throw FormatError("malformed PPM header", (long long)pos);
    }
    if (width <= 0 || height <= 0) throw FormatError("bad PPM dimensions", (long long)pos);
    ++pos;  // single whitespace byte after maxval
    std::size_t need = std::size_t(width) * height * 3;
    if (bytes.size() - pos < need)
        throw FormatError("truncated PPM pixel data", (long long)bytes.size());
    ImageBuffer img;
    img.width = width;
    img.height = height;
    img.channels = 3;
    img.values.resize(need);
    for (std::size_t i = 0; i < need; ++i) img.values[i] = float(bytes[pos + i]) / 255.0f;
    return img;
}

inline std::vector<unsigned char> encode_ppm(const ImageBuffer& img) {
    std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + img.values.size());
    for (float v : img.values) out.push_back(to_byte(v));
    return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    if (s.size() < suffix.size()) return false;
    std::string tail = s.substr(s.size() - suffix.size());
    std::transform(tail.begin(), tail.end(), tail.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return tail == suffix;
}

}  // namespace detail

// Decodes an 8-bit PNG (non-interlaced, gray or RGB) or binary PPM; the
// format is sniffed from the leading bytes, not the file name.
inline ImageBuffer decode_image(const std::string& path) {
    auto bytes = detail::read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), detail::kPngSig, 8) == 0)
        return detail::decode_png(bytes);
    throw FormatError("unrecognized image format in " + path, 0);
}

// Encodes as PPM when the path ends in .ppm, PNG otherwise.
inline void encode_image(const ImageBuffer& img, const std::string& path) {
    if (img.width <= 0 || img.height <= 0 || img.channels != 3 ||
        img.values.size() != std::size_t(img.width) * img.height * 3)
        throw DimensionError("image buffer is inconsistent");
    detail::write_file(path, detail::ends_with(path, ".ppm") ? detail::encode_ppm(img)
                                                             : detail::encode_png(img));
}

// I = J*t + A*(1-t) per pixel per channel, clamped to [0,1].
inline ImageBuffer synthesize_haze(const ImageBuffer& J, const HazeParams& params) {
    if (!(params.A > 0.0f && params.A <= 1.0f))
        throw ParamError("atmospheric light must be in (0,1]");
    if (params.t_field.size() != std::size_t(J.width) * J.height)
        throw DimensionError("transmission field does not match image dimensions");
    for (float t : params.t_field)
        if (!(t > 0.0f && t < 1.0f)) throw ParamError("transmission must be strictly in (0,1)");
    ImageBuffer out = J;
    for (int y = 0; y < J.height; ++y)
        for (int x = 0; x < J.width; ++x) {
            float t = params.t_field[std::size_t(y) * J.width + x];
            for (int c = 0; c < 3; ++c) {
                float v = J.at(y, x, c) * t + params.A * (1.0f - t);
                out.at(y, x, c) = std::clamp(v, 0.0f, 1.0f);
            }
        }
    return out;
}

// Seeded noise in [0.05,0.95]; `smoothness` box-blur passes, then a min-max
// rescale back to the full range so the haze keeps usable contrast.
inline std::vector<float> generate_t_field(int width, int height, unsigned seed, int smoothness) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> dist(0.05f, 0.95f);
    std::size_t count = std::size_t(width) * height;
    std::vector<float> field(count);
    for (auto& v : field) v = dist(rng);
    std::vector<float> tmp(count);
    for (int pass = 0; pass < smoothness; ++pass) {
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = std::clamp(y + dy, 0, height - 1);
                        int xx = std::clamp(x + dx, 0, width - 1);
                        acc += field[std::size_t(yy) * width + xx];
                    }
                tmp[std::size_t(y) * width + x] = float(acc / 9.0);
            }
        field.swap(tmp);
    }
    if (smoothness > 0) {
        auto [lo_it, hi_it] = std::minmax_element(field.begin(), field.end());
        float lo = *lo_it, span = *hi_it - *lo_it;
        for (auto& v : field) v = span > 1e-12f ? 0.05f + 0.9f * (v - lo) / span : 0.5f;
    }
    return field;
}

// Deterministic synthetic scene: smooth per-channel fields overlaid with a few
// solid rectangles, so images carry both gradients and hard edges.
inline ImageBuffer generate_clear_image(int width, int height, unsigned seed) {
    if (width < 1 || height < 1) throw ParamError("image dimensions must be positive");
    ImageBuffer img;
    img.width = width;
    img.height = height;
    img.channels = 3;
    img.values.resize(std::size_t(width) * height * 3);
    for (int c = 0; c < 3; ++c) {
        std::vector<float> field =
            generate_t_field(width, height, seed ^ (0x9e3779b9u * unsigned(c + 1)), 4);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) img.at(y, x, c) = field[std::size_t(y) * width + x];
    }
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> count_dist(3, 5);
    std::uniform_int_distribution<int> xd(0, width - 1), yd(0, height - 1);
    std::uniform_real_distribution<float> color(0.0f, 1.0f);
    int shapes = count_dist(rng);
    for (int i = 0; i < shapes; ++i) {
        int x0 = xd(rng), x1 = xd(rng), y0 = yd(rng), y1 = yd(rng);
        if (x1 < x0) std::swap(x0, x1);
        if (y1 < y0) std::swap(y0, y1);
        float r = color(rng), g = color(rng), b = color(rng);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                img.at(y, x, 0) = r;
                img.at(y, x, 1) = g;
                img.at(y, x, 2) = b;
            }
    }
    return img;
}

// Paired corpus under <dir>/{train,val}/{hazy,clear}/NNNN.png. Pair i uses
// seed base+i; air light is uniform in [0.8,1.0], transmission a smooth field.
inline void synth_corpus(const std::string& dir, unsigned base_seed, int train_pairs = 16,
                         int val_pairs = 4, int size = 64) {
    if (train_pairs < 1 || val_pairs < 0)
        throw ParamError("corpus needs at least one training pair");
    if (size < 1) throw ParamError("corpus image size must be positive");
    namespace fs = std::filesystem;
    for (int i = 0; i < train_pairs + val_pairs; ++i) {
        unsigned seed = base_seed + unsigned(i);
        ImageBuffer clear = generate_clear_image(size, size, seed);
        HazeParams params;
        params.t_field = generate_t_field(size, size, seed + 1000003u, 6);
        std::mt19937 arng(seed + 2000003u);
        params.A = std::uniform_real_distribution<float>(0.8f, 1.0f)(arng);
        ImageBuffer hazy = synthesize_haze(clear, params);
        bool in_train = i < train_pairs;
        fs::path split = fs::path(dir) / (in_train ? "train" : "val");
        std::error_code ec;
        fs::create_directories(split / "hazy", ec);
        fs::create_directories(split / "clear", ec);
        if (ec) throw IoError("cannot create corpus directory: " + (split).string());
        char name[16];
        std::snprintf(name, sizeof name, "%04d.png", in_train ? i : i - train_pairs);
        encode_image(hazy, (split / "hazy" / name).string());
        encode_image(clear, (split / "clear" / name).string());
    }
}

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.width != b.width || a.height != b.height || a.values.size() != b.values.size())
        throw DimensionError("psnr operands differ in size");
    double se = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        double d = double(a.values[i]) - double(b.values[i]);
        se += d * d;
    }
    double mse = se / double(a.values.size());
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

// HWC image -> (1,3,H,W) tensor.
inline Tensor image_to_tensor(const ImageBuffer& img) {
    Tensor t = Tensor::zeros({1, 3, img.height, img.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(y, x, c);
    return t;
}

// (1,3,H,W) or (1,1,H,W) tensor -> HWC image; single channels are replicated.
inline ImageBuffer tensor_to_image(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.n != 1 || (s.c != 1 && s.c != 3))
        throw DimensionError("expected a (1,1,H,W) or (1,3,H,W) tensor, got " + s.str());
    ImageBuffer img;
    img.width = int(s.w);
    img.height = int(s.h);
    img.channels = 3;
    img.values.resize(std::size_t(s.w) * s.h * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = std::clamp(t.at(0, s.c == 3 ? c : 0, y, x), 0.0f, 1.0f);
    return img;
}

}  // namespace falcon
