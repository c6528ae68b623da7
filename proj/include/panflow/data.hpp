#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "panflow/errors.hpp"
#include "panflow/tensor.hpp"

namespace panflow {

/// Channel-last raster of 32-bit floats: element (y, x, c) lives at (y * width + x) * channels + c.
struct RasterImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<float> data;

    RasterImage() = default;
    RasterImage(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}
    RasterImage(std::size_t h, std::size_t w, std::size_t c, std::vector<float> values)
        : height(h), width(w), channels(c), data(std::move(values)) {
        if (data.size() != h * w * c) throw ShapeError("raster data does not match " + shape_string());
    }

    float& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }

    std::size_t pixels() const { return height * width; }
    bool same_shape(const RasterImage& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    std::string shape_string() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }

    /// One band as a contiguous height x width plane.
    std::vector<double> band(std::size_t c) const {
        std::vector<double> out(pixels());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = data[i * channels + c];
        return out;
    }

    friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// Raster -> 1 x C x H x W tensor.
template <class T>
Tensor<T> to_tensor(const RasterImage& img) {
    auto t = Tensor<T>::uninitialized(Shape{1, img.channels, img.height, img.width});
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (std::size_t i = 0; i < img.pixels(); ++i) t[c * img.pixels() + i] = static_cast<T>(img.data[i * img.channels + c]);
    }
    return t;
}

/// Stacks same-shaped rasters into an N x C x H x W batch.
template <class T>
Tensor<T> to_batch(const std::vector<const RasterImage*>& imgs) {
    if (imgs.empty()) throw ShapeError("cannot batch zero images");
    const RasterImage& first = *imgs.front();
    const std::size_t per = first.data.size();
    auto t = Tensor<T>::uninitialized(Shape{imgs.size(), first.channels, first.height, first.width});
    for (std::size_t n = 0; n < imgs.size(); ++n) {
        if (!imgs[n]->same_shape(first)) {
            throw ShapeError("batch geometry mismatch: " + imgs[n]->shape_string() + " vs " + first.shape_string());
        }
        T* dst = t.data() + n * per;
        for (std::size_t c = 0; c < first.channels; ++c) {
            for (std::size_t i = 0; i < first.pixels(); ++i) {
                dst[c * first.pixels() + i] = static_cast<T>(imgs[n]->data[i * first.channels + c]);
            }
        }
    }
    return t;
}

/// Sample n of an N x C x H x W tensor back to a raster (no clamping).
template <class T>
RasterImage from_tensor(const Tensor<T>& t, std::size_t n = 0) {
    if (t.dim() != 4) throw ShapeError("from_tensor expects N x C x H x W, got " + shape_str(t.shape()));
    RasterImage img(t.size(2), t.size(3), t.size(1));
    const std::size_t plane = img.pixels();
    const T* src = t.data() + n * img.channels * plane;
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) img.data[i * img.channels + c] = static_cast<float>(src[c * plane + i]);
    }
    return img;
}

inline void clamp_unit(RasterImage& img) {
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SyntheticSceneConfig {
    int bands = 4;
    int size = 128;
    std::uint64_t seed = 0;
    int rectangles = 12;
    int gradients = 2;
    int octaves = 3;
    // Empty means the default ramp w_b proportional to b + 1.
    std::vector<double> pan_weights;

    std::vector<double> resolved_pan_weights() const {
        if (!pan_weights.empty()) return pan_weights;
        std::vector<double> w(static_cast<std::size_t>(bands));
        const double total = bands * (bands + 1) / 2.0;
        for (int b = 0; b < bands; ++b) w[static_cast<std::size_t>(b)] = (b + 1) / total;
        return w;
    }
};

namespace detail {

// Smooth value noise on a (cells + 1)^2 lattice, bilinear with a smoothstep fade.
inline std::vector<double> value_noise(std::size_t size, std::size_t cells, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> lattice((cells + 1) * (cells + 1));
    for (auto& v : lattice) v = u(rng);
    std::vector<double> out(size * size);
    const double step = static_cast<double>(cells) / static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * step;
        const std::size_t iy = std::min(static_cast<std::size_t>(fy), cells - 1);
        double ty = fy - static_cast<double>(iy);
        ty = ty * ty * (3.0 - 2.0 * ty);
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * step;
            const std::size_t ix = std::min(static_cast<std::size_t>(fx), cells - 1);
            double tx = fx - static_cast<double>(ix);
            tx = tx * tx * (3.0 - 2.0 * tx);
            const double a = lattice[iy * (cells + 1) + ix], b = lattice[iy * (cells + 1) + ix + 1];
            const double c = lattice[(iy + 1) * (cells + 1) + ix], d = lattice[(iy + 1) * (cells + 1) + ix + 1];
            out[y * size + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

} // namespace detail

/// Deterministic HRMS scene: gray background, band-weighted ramps, rectangles with
/// their own spectra, and multi-octave texture shared across bands with per-band gains.
inline RasterImage synth_scene(const SyntheticSceneConfig& cfg) {
    if (cfg.bands < 1 || cfg.size < 1) throw ConfigError("synthetic scene needs bands >= 1 and size >= 1");
    if (cfg.rectangles < 0 || cfg.gradients < 0 || cfg.octaves < 0) {
        throw ConfigError("synthetic scene counts must be non-negative");
    }
    const auto bands = static_cast<std::size_t>(cfg.bands);
    const auto size = static_cast<std::size_t>(cfg.size);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> img(size * size * bands, 0.5);

    // A random "material" spectrum: a common brightness plus a smooth tilt across bands.
    auto spectrum = [&](double lo, double hi) {
        const double level = lo + (hi - lo) * u(rng);
        const double tilt = 0.3 * (u(rng) - 0.5);
        std::vector<double> s(bands);
        for (std::size_t b = 0; b < bands; ++b) {
            const double pos = bands > 1 ? static_cast<double>(b) / static_cast<double>(bands - 1) - 0.5 : 0.0;
            s[b] = level + tilt * pos + 0.05 * (u(rng) - 0.5);
        }
        return s;
    };

    for (int g = 0; g < cfg.gradients; ++g) {
        const double angle = 2.0 * 3.14159265358979323846 * u(rng);
        const double cx = std::cos(angle), cy = std::sin(angle);
        const auto gain = spectrum(-0.25, 0.25);
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                const double t = ((static_cast<double>(x) + 0.5) / static_cast<double>(size) - 0.5) * cx +
                                 ((static_cast<double>(y) + 0.5) / static_cast<double>(size) - 0.5) * cy;
                for (std::size_t b = 0; b < bands; ++b) img[(y * size + x) * bands + b] += gain[b] * t;
            }
        }
    }

    for (int r = 0; r < cfg.rectangles; ++r) {
        const auto w = static_cast<std::size_t>(2 + u(rng) * static_cast<double>(size) / 3.0);
        const auto h = static_cast<std::size_t>(2 + u(rng) * static_cast<double>(size) / 3.0);
        const auto x0 = static_cast<std::size_t>(u(rng) * static_cast<double>(size));
        const auto y0 = static_cast<std::size_t>(u(rng) * static_cast<double>(size));
        const auto value = spectrum(0.1, 0.9);
        for (std::size_t y = y0; y < std::min(size, y0 + h); ++y) {
            for (std::size_t x = x0; x < std::min(size, x0 + w); ++x) {
                for (std::size_t b = 0; b < bands; ++b) img[(y * size + x) * bands + b] = value[b];
            }
        }
    }

    for (int o = 0; o < cfg.octaves; ++o) {
        const std::size_t cells = std::min(size, std::size_t{4} << o);
        const double amp = 0.08 * std::pow(0.6, o);
        const auto noise = detail::value_noise(size, std::max<std::size_t>(cells, 1), rng);
        std::vector<double> gain(bands);
        const double shared = 0.7 + 0.3 * u(rng);
        for (auto& gb : gain) gb = amp * (shared + 0.3 * (u(rng) - 0.5));
        for (std::size_t i = 0; i < size * size; ++i) {
            for (std::size_t b = 0; b < bands; ++b) img[i * bands + b] += gain[b] * noise[i];
        }
    }

    RasterImage out(size, size, bands);
    for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
    return out;
}

/// P = sum_b w_b H_b; weights must be non-negative and sum to one (one-hot selects a band).
inline RasterImage pan_from_hrms(const RasterImage& hrms, const std::vector<double>& weights) {
    if (weights.size() != hrms.channels) {
        throw ConfigError("PAN weights have " + std::to_string(weights.size()) + " entries for " +
                          std::to_string(hrms.channels) + " bands");
    }
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("PAN weights must be non-negative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("PAN weights must sum to 1");
    RasterImage pan(hrms.height, hrms.width, 1);
    for (std::size_t i = 0; i < hrms.pixels(); ++i) {
        double acc = 0.0;
        for (std::size_t b = 0; b < hrms.channels; ++b) acc += weights[b] * hrms.data[i * hrms.channels + b];
        pan.data[i] = static_cast<float>(acc);
    }
    return pan;
}

// ---------------------------------------------------------------------------
// Wald degradation

enum class BorderMode {
    reflect,  // mirror about the edge sample (d c b | a b c d ... -> b a | ...), edge not repeated
    wrap,     // periodic; only used to test shift equivariance
};

/// Normalized 1-D Gaussian taps, length 2 * ceil(2 sigma) + 1.
inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(2.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

inline std::ptrdiff_t border_index(std::ptrdiff_t i, std::ptrdiff_t n, BorderMode mode) {
    if (mode == BorderMode::wrap) return ((i % n) + n) % n;
    if (n == 1) return 0;
    const std::ptrdiff_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

/// Separable Gaussian filter, channel by channel, in double precision.
inline std::vector<double> gaussian_blur(const RasterImage& img, double sigma, BorderMode mode) {
    const auto k = gaussian_kernel(sigma);
    const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
    const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
    const std::size_t ch = img.channels;
    std::vector<double> tmp(img.data.size()), out(img.data.size());
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
                    const auto xx = border_index(x + t, w, mode);
                    acc += k[static_cast<std::size_t>(t + radius)] * img.data[static_cast<std::size_t>(y * w + xx) * ch + c];
                }
                tmp[static_cast<std::size_t>(y * w + x) * ch + c] = acc;
            }
        }
    }
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
                    const auto yy = border_index(y + t, h, mode);
                    acc += k[static_cast<std::size_t>(t + radius)] * tmp[static_cast<std::size_t>(yy * w + x) * ch + c];
                }
                out[static_cast<std::size_t>(y * w + x) * ch + c] = acc;
            }
        }
    }
    return out;
}

/// Gaussian low-pass (sigma = s/2) followed by s x s block means.
inline RasterImage wald_degrade(const RasterImage& img, int scale, BorderMode mode = BorderMode::reflect) {
    if (scale < 1) throw ConfigError("scale must be >= 1");
    const auto s = static_cast<std::size_t>(scale);
    if (img.height == 0 || img.width == 0 || img.height % s != 0 || img.width % s != 0) {
        throw ShapeError("image " + img.shape_string() + " is not divisible by scale " + std::to_string(scale));
    }
    if (s == 1) return img;
    const auto blurred = gaussian_blur(img, static_cast<double>(scale) / 2.0, mode);
    RasterImage out(img.height / s, img.width / s, img.channels);
    const double inv = 1.0 / static_cast<double>(s * s);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < s; ++dy) {
                    for (std::size_t dx = 0; dx < s; ++dx) {
                        acc += blurred[((y * s + dy) * img.width + x * s + dx) * img.channels + c];
                    }
                }
                out.at(y, x, c) = static_cast<float>(acc * inv);
            }
        }
    }
    return out;
}

/// Keys cubic convolution (a = -0.5) upsampling with clamped borders; used as the
/// bicubic baseline. Output is clamped to [0, 1].
inline RasterImage bicubic_upsample(const RasterImage& img, int scale) {
    if (scale < 1) throw ConfigError("scale must be >= 1");
    const auto s = static_cast<std::size_t>(scale);
    auto keys = [](double t) {
        constexpr double a = -0.5;
        t = std::abs(t);
        if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
        if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
        return 0.0;
    };
    struct Taps {
        std::array<std::ptrdiff_t, 4> idx;
        std::array<double, 4> w;
    };
    auto taps_for = [&](std::size_t out_len, std::size_t in_len) {
        std::vector<Taps> taps(out_len);
        for (std::size_t o = 0; o < out_len; ++o) {
            const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(s) - 0.5;
            const auto base = static_cast<std::ptrdiff_t>(std::floor(src));
            for (int j = 0; j < 4; ++j) {
                const std::ptrdiff_t i = base - 1 + j;
                taps[o].idx[static_cast<std::size_t>(j)] = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(in_len) - 1);
                taps[o].w[static_cast<std::size_t>(j)] = keys(src - static_cast<double>(i));
            }
        }
        return taps;
    };
    const auto ty = taps_for(img.height * s, img.height);
    const auto tx = taps_for(img.width * s, img.width);
    RasterImage out(img.height * s, img.width * s, img.channels);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < 4; ++j) {
                    double row = 0.0;
                    for (std::size_t i = 0; i < 4; ++i) {
                        row += tx[x].w[i] * img.at(static_cast<std::size_t>(ty[y].idx[j]), static_cast<std::size_t>(tx[x].idx[i]), c);
                    }
                    acc += ty[y].w[j] * row;
                }
                out.at(y, x, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Triples

struct SceneTriple {
    std::string id;
    RasterImage hrms;
    RasterImage lrms;
    RasterImage pan;
};

struct TripleConfig {
    int scale = 4;
    std::vector<double> pan_weights;  // empty: the synthetic default ramp
};

/// Reduced-resolution protocol: H is the ground truth, P and L are synthesized from it.
inline SceneTriple make_triple(const RasterImage& hrms, const TripleConfig& cfg, std::string id = {}) {
    auto weights = cfg.pan_weights;
    if (weights.empty()) {
        SyntheticSceneConfig d;
        d.bands = static_cast<int>(hrms.channels);
        weights = d.resolved_pan_weights();
    }
    SceneTriple t;
    t.id = std::move(id);
    t.hrms = hrms;
    t.pan = pan_from_hrms(hrms, weights);
    t.lrms = wald_degrade(hrms, cfg.scale);
    return t;
}

// ---------------------------------------------------------------------------
// PFNR raster I/O

namespace io {

inline constexpr char kRasterMagic[4] = {'P', 'F', 'N', 'R'};
inline constexpr std::uint16_t kRasterVersion = 1;

template <class U>
U byteswap_if_big(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    } else {
        return v;
    }
}

/// Little-endian byte sink.
class Writer {
public:
    template <class U>
    void put(U v) {
        v = byteswap_if_big(v);
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(U));
    }
    void put_bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    const std::vector<unsigned char>& bytes() const { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

/// Little-endian byte source with truncation checks.
class Reader {
public:
    Reader(const std::vector<unsigned char>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return byteswap_if_big(v);
    }
    void get_bytes(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            throw FormatError(FormatError::Code::truncated,
                              what_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                                  std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
        }
    }

    const std::vector<unsigned char>& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Code::io, "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw FormatError(FormatError::Code::io, "read error on " + path.string());
    return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Code::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Code::io, "write error on " + path.string());
}

} // namespace io

inline std::vector<unsigned char> encode_raster(const RasterImage& img) {
    if (img.height == 0 || img.width == 0 || img.channels == 0) {
        throw FormatError(FormatError::Code::bad_dimensions, "refusing to encode empty raster " + img.shape_string());
    }
    io::Writer w;
    w.put_bytes(io::kRasterMagic, 4);
    w.put<std::uint16_t>(io::kRasterVersion);
    for (std::size_t d : {img.height, img.width, img.channels}) {
        if (d > std::numeric_limits<std::uint32_t>::max()) {
            throw FormatError(FormatError::Code::bad_dimensions, "raster extent exceeds u32");
        }
        w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    }
    for (float v : img.data) {
        if (std::isnan(v)) throw NumericError("NaN pixel in raster " + img.shape_string());
        w.put<float>(std::clamp(v, 0.0f, 1.0f));
    }
    return w.bytes();
}

inline RasterImage decode_raster(const std::vector<unsigned char>& bytes, const std::string& what = "raster") {
    io::Reader r(bytes, what);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, io::kRasterMagic, 4) != 0) {
        throw FormatError(FormatError::Code::bad_magic, what + ": not a PFNR raster (bad magic)");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != io::kRasterVersion) {
        throw FormatError(FormatError::Code::unsupported_version,
                          what + ": unsupported PFNR version " + std::to_string(version));
    }
    const std::uint64_t h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>(), c = r.get<std::uint32_t>();
    if (h == 0 || w == 0 || c == 0) {
        throw FormatError(FormatError::Code::bad_dimensions,
                          what + ": zero-size dimensions " + std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
    }
    // h * w fits in 64 bits; the byte count h * w * c * 4 may not.
    if (h * w > std::numeric_limits<std::uint64_t>::max() / c / sizeof(float)) {
        throw FormatError(FormatError::Code::bad_dimensions,
                          what + ": dimensions " + std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c) +
                              " overflow the addressable size");
    }
    if (h * w * c > r.remaining() / sizeof(float)) {
        throw FormatError(FormatError::Code::truncated,
                          what + ": header declares " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                              std::to_string(c) + " values but only " + std::to_string(r.remaining()) +
                              " payload bytes are present");
    }
    RasterImage img(h, w, c);
    for (float& v : img.data) v = r.get<float>();
    if (r.remaining() != 0) {
        throw FormatError(FormatError::Code::malformed,
                          what + ": " + std::to_string(r.remaining()) + " trailing bytes after pixel data");
    }
    return img;
}

inline void write_raster(const RasterImage& img, const std::filesystem::path& path) {
    io::write_file(path, encode_raster(img));
}

inline RasterImage read_raster(const std::filesystem::path& path) {
    return decode_raster(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
    std::string id;
    std::filesystem::path hrms;
    std::filesystem::path lrms;
    std::filesystem::path pan;
};

/// Tab-separated `id  h_path  l_path  p_path` lines. `# split: NAME` and `# seed: N`
/// comments carry metadata; every other `#` line is ignored. Relative paths resolve
/// against the manifest's directory.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::string split = "train";
    std::uint64_t seed = 0;
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base = {}) {
    DatasetManifest m;
    std::set<std::string> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            const std::string body = trim(t.substr(1));
            if (body.rfind("split:", 0) == 0) m.split = trim(body.substr(6));
            if (body.rfind("seed:", 0) == 0) {
                try {
                    m.seed = std::stoull(trim(body.substr(5)));
                } catch (const std::exception&) {
                    throw FormatError(FormatError::Code::malformed, "manifest line " + std::to_string(lineno) + ": bad seed");
                }
            }
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() != 4) {
            throw FormatError(FormatError::Code::malformed, "manifest line " + std::to_string(lineno) + ": expected 4 tab-separated fields, got " +
                                                                std::to_string(fields.size()));
        }
        if (!ids.insert(fields[0]).second) {
            throw FormatError(FormatError::Code::malformed, "manifest line " + std::to_string(lineno) + ": duplicate id " + fields[0]);
        }
        auto resolve = [&](const std::string& p) {
            std::filesystem::path path(p);
            return path.is_relative() && !base.empty() ? base / path : path;
        };
        m.entries.push_back({fields[0], resolve(fields[1]), resolve(fields[2]), resolve(fields[3])});
    }
    return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Code::io, "cannot open manifest " + path.string());
    return parse_manifest(in, path.parent_path());
}

/// Writes paths relative to the manifest directory when they live below it.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "# panflow manifest\n# split: " << m.split << "\n# seed: " << m.seed << "\n";
    const auto base = path.parent_path();
    auto rel = [&](const std::filesystem::path& p) {
        if (base.empty()) return p.generic_string();
        auto r = p.lexically_relative(base);
        return (r.empty() || *r.begin() == "..") ? p.generic_string() : r.generic_string();
    };
    for (const auto& e : m.entries) os << e.id << '\t' << rel(e.hrms) << '\t' << rel(e.lrms) << '\t' << rel(e.pan) << '\n';
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError(FormatError::Code::io, "cannot write manifest " + path.string());
    out << os.str();
    if (!out) throw FormatError(FormatError::Code::io, "write error on manifest " + path.string());
}

/// Loads every triple and checks the factor-s geometry.
inline std::vector<SceneTriple> load_dataset(const DatasetManifest& m, int scale) {
    std::vector<SceneTriple> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        SceneTriple t{e.id, read_raster(e.hrms), read_raster(e.lrms), read_raster(e.pan)};
        const auto s = static_cast<std::size_t>(scale);
        if (t.pan.channels != 1 || t.pan.height != t.hrms.height || t.pan.width != t.hrms.width ||
            t.lrms.channels != t.hrms.channels || t.lrms.height * s != t.hrms.height || t.lrms.width * s != t.hrms.width) {
            throw ShapeError("triple " + e.id + " geometry H " + t.hrms.shape_string() + ", L " + t.lrms.shape_string() +
                             ", P " + t.pan.shape_string() + " is inconsistent with scale " + std::to_string(scale));
        }
        out.push_back(std::move(t));
    }
    return out;
}

/// `count` synthetic triples. Scene i draws from its own seed so any subset can be
/// regenerated independently.
inline std::vector<SceneTriple> synthesize_triples(int count, const SyntheticSceneConfig& base, int scale,
                                                   const std::string& prefix = "scene") {
    if (count < 0) throw ConfigError("count must be >= 0");
    const TripleConfig tc{scale, base.resolved_pan_weights()};
    std::vector<SceneTriple> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) {
        SyntheticSceneConfig cfg = base;
        std::seed_seq seq{base.seed, std::uint64_t{0x5eed}, std::uint64_t{i}};
        std::uint32_t words[2];
        seq.generate(words, words + 2);
        cfg.seed = (std::uint64_t{words[0]} << 32) | words[1];
        char name[64];
        std::snprintf(name, sizeof name, "%s_%04zu", prefix.c_str(), i);
        out.push_back(make_triple(synth_scene(cfg), tc, name));
    }
    return out;
}

/// Writes triples as PFNR files plus `manifest.tsv` into `dir`.
inline DatasetManifest write_dataset(const std::filesystem::path& dir, const std::vector<SceneTriple>& triples,
                                     const std::string& split, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.split = split;
    m.seed = seed;
    for (const auto& t : triples) {
        ManifestEntry e{t.id, dir / (t.id + "_h.pfnr"), dir / (t.id + "_l.pfnr"), dir / (t.id + "_p.pfnr")};
        write_raster(t.hrms, e.hrms);
        write_raster(t.lrms, e.lrms);
        write_raster(t.pan, e.pan);
        m.entries.push_back(std::move(e));
    }
    write_manifest(m, dir / "manifest.tsv");
    return m;
}

} // namespace panflow
