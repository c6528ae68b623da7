#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "panflow/data.hpp"
#include "panflow/errors.hpp"

namespace panflow::metrics {

inline constexpr double kPsnrCap = 99.0;

inline void require_same_shape(const RasterImage& x, const RasterImage& y, const char* what) {
    if (!x.same_shape(y)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + x.shape_string() + " vs " + y.shape_string());
    }
    if (x.data.empty()) throw ShapeError(std::string(what) + ": empty image");
}

inline double mse(const RasterImage& x, const RasterImage& y) {
    require_same_shape(x, y, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double d = static_cast<double>(x.data[i]) - y.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x.data.size());
}

/// 10 log10(peak^2 / MSE); zero error reports the 99 dB cap.
inline double psnr_from_mse(double e, double peak = 1.0) {
    if (e == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / e));
}

inline double psnr(const RasterImage& x, const RasterImage& y, double peak = 1.0) { return psnr_from_mse(mse(x, y), peak); }

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;
};

namespace detail {

// "Valid" separable filtering of one plane: out is (h - n + 1) x (w - n + 1).
inline std::vector<double> filter_valid(const std::vector<double>& in, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
    const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t t = 0; t < n; ++t) acc += k[t] * in[y * w + x + t];
            tmp[y * ow + x] = acc;
        }
    }
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t t = 0; t < n; ++t) acc += k[t] * tmp[(y + t) * ow + x];
            out[y * ow + x] = acc;
        }
    }
    return out;
}

inline std::vector<double> ssim_taps(const SsimParams& p) {
    std::vector<double> k(static_cast<std::size_t>(p.window));
    const double c = (p.window - 1) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double d = static_cast<double>(i) - c;
        k[i] = std::exp(-d * d / (2.0 * p.sigma * p.sigma));
        total += k[i];
    }
    for (double& v : k) v /= total;
    return k;
}

} // namespace detail

/// Mean SSIM over all valid window positions, averaged over bands.
inline double ssim(const RasterImage& x, const RasterImage& y, const SsimParams& p = {}) {
    require_same_shape(x, y, "ssim");
    const auto n = static_cast<std::size_t>(p.window);
    if (x.height < n || x.width < n) {
        throw ShapeError("ssim: image " + x.shape_string() + " is smaller than the " + std::to_string(n) + "x" +
                         std::to_string(n) + " window");
    }
    const auto k = detail::ssim_taps(p);
    const double c1 = (p.k1 * p.range) * (p.k1 * p.range);
    const double c2 = (p.k2 * p.range) * (p.k2 * p.range);
    double total = 0.0;
    for (std::size_t c = 0; c < x.channels; ++c) {
        const auto a = x.band(c), b = y.band(c);
        std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            aa[i] = a[i] * a[i];
            bb[i] = b[i] * b[i];
            ab[i] = a[i] * b[i];
        }
        const auto mu_a = detail::filter_valid(a, x.height, x.width, k);
        const auto mu_b = detail::filter_valid(b, x.height, x.width, k);
        const auto s_aa = detail::filter_valid(aa, x.height, x.width, k);
        const auto s_bb = detail::filter_valid(bb, x.height, x.width, k);
        const auto s_ab = detail::filter_valid(ab, x.height, x.width, k);
        double band_sum = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double va = s_aa[i] - mu_a[i] * mu_a[i];
            const double vb = s_bb[i] - mu_b[i] * mu_b[i];
            const double cov = s_ab[i] - mu_a[i] * mu_b[i];
            band_sum += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
                        ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        }
        total += band_sum / static_cast<double>(mu_a.size());
    }
    return total / static_cast<double>(x.channels);
}

struct SamResult {
    double radians = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;  // pixels where either spectrum has zero norm
};

inline SamResult sam_detail(const RasterImage& x, const RasterImage& y) {
    require_same_shape(x, y, "sam");
    if (x.channels < 2) throw ShapeError("sam needs at least 2 bands, got " + std::to_string(x.channels));
    SamResult r;
    double acc = 0.0;
    for (std::size_t p = 0; p < x.pixels(); ++p) {
        double nx = 0.0, ny = 0.0;
        for (std::size_t c = 0; c < x.channels; ++c) {
            const double a = x.data[p * x.channels + c], b = y.data[p * x.channels + c];
            nx += a * a;
            ny += b * b;
        }
        if (nx == 0.0 || ny == 0.0) {
            ++r.skipped;
            continue;
        }
        // Half-angle form: acos loses about 1e-8 rad near zero angle, this is exact for x == y.
        nx = std::sqrt(nx);
        ny = std::sqrt(ny);
        double diff = 0.0, sum = 0.0;
        for (std::size_t c = 0; c < x.channels; ++c) {
            const double u = x.data[p * x.channels + c] / nx, v = y.data[p * x.channels + c] / ny;
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        acc += 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
        ++r.evaluated;
    }
    if (r.evaluated == 0) throw NumericError("sam: every pixel has a zero-norm spectrum");
    r.radians = acc / static_cast<double>(r.evaluated);
    return r;
}

/// Mean spectral angle in radians.
inline double sam(const RasterImage& x, const RasterImage& y) { return sam_detail(x, y).radians; }

/// ERGAS with the reference in the second argument; ratio is the high/low resolution
/// ratio 1/s.
inline double ergas(const RasterImage& fused, const RasterImage& reference, double ratio = 0.25) {
    require_same_shape(fused, reference, "ergas");
    double acc = 0.0;
    const auto pixels = static_cast<double>(fused.pixels());
    for (std::size_t c = 0; c < fused.channels; ++c) {
        double se = 0.0, mu = 0.0;
        for (std::size_t p = 0; p < fused.pixels(); ++p) {
            const double r = reference.data[p * fused.channels + c];
            const double d = static_cast<double>(fused.data[p * fused.channels + c]) - r;
            se += d * d;
            mu += r;
        }
        mu /= pixels;
        if (mu == 0.0) throw NumericError("ergas: reference band " + std::to_string(c) + " has zero mean");
        const double rmse = std::sqrt(se / pixels);
        acc += (rmse / mu) * (rmse / mu);
    }
    return 100.0 * ratio * std::sqrt(acc / static_cast<double>(fused.channels));
}

// ---------------------------------------------------------------------------
// No-reference metrics

struct QnrConfig {
    int block = 32;  // at the fused resolution; block / s is used at the LR resolution
    double alpha = 1.0;
    double beta = 1.0;
    double p = 1.0;
    double q = 1.0;
};

/// Universal image quality index of two equally sized planes.
inline double q_index(const double* a, const double* b, std::size_t n) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
        cov += (a[i] - ma) * (b[i] - mb);
    }
    va /= static_cast<double>(n);
    vb /= static_cast<double>(n);
    cov /= static_cast<double>(n);
    const double var_sum = va + vb, mean_sq = ma * ma + mb * mb;
    // Degenerate blocks: two flat blocks compare by their means only.
    if (var_sum == 0.0) return mean_sq == 0.0 ? 1.0 : 2.0 * ma * mb / mean_sq;
    if (mean_sq == 0.0) return 2.0 * cov / var_sum;
    return 4.0 * cov * ma * mb / (var_sum * mean_sq);
}

/// Q averaged over non-overlapping block x block tiles (partial tiles at the far
/// edges are dropped; a block larger than the plane shrinks to the plane).
inline double q_blocks(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                       std::size_t block) {
    block = std::max<std::size_t>(1, std::min({block, h, w}));
    std::vector<double> ta(block * block), tb(block * block);
    double acc = 0.0;
    std::size_t tiles = 0;
    for (std::size_t y0 = 0; y0 + block <= h; y0 += block) {
        for (std::size_t x0 = 0; x0 + block <= w; x0 += block) {
            for (std::size_t y = 0; y < block; ++y) {
                for (std::size_t x = 0; x < block; ++x) {
                    ta[y * block + x] = a[(y0 + y) * w + x0 + x];
                    tb[y * block + x] = b[(y0 + y) * w + x0 + x];
                }
            }
            acc += q_index(ta.data(), tb.data(), ta.size());
            ++tiles;
        }
    }
    return acc / static_cast<double>(tiles);
}

inline std::size_t lr_block(const QnrConfig& cfg, int scale) {
    return static_cast<std::size_t>(std::max(1, cfg.block / std::max(1, scale)));
}

/// Spectral distortion: change of inter-band Q values between the LR input and the fusion.
inline double d_lambda(const RasterImage& fused, const RasterImage& lrms, int scale, const QnrConfig& cfg = {}) {
    const auto s = static_cast<std::size_t>(scale);
    if (fused.channels != lrms.channels || lrms.height * s != fused.height || lrms.width * s != fused.width) {
        throw ShapeError("d_lambda geometry mismatch: fused " + fused.shape_string() + ", LRMS " + lrms.shape_string() +
                         ", scale " + std::to_string(scale));
    }
    const std::size_t bands = fused.channels;
    if (bands < 2) return 0.0;
    std::vector<std::vector<double>> fb(bands), lb(bands);
    for (std::size_t c = 0; c < bands; ++c) {
        fb[c] = fused.band(c);
        lb[c] = lrms.band(c);
    }
    double acc = 0.0;
    for (std::size_t l = 0; l < bands; ++l) {
        for (std::size_t r = 0; r < bands; ++r) {
            if (l == r) continue;
            const double qf = q_blocks(fb[l], fb[r], fused.height, fused.width, static_cast<std::size_t>(cfg.block));
            const double ql = q_blocks(lb[l], lb[r], lrms.height, lrms.width, lr_block(cfg, scale));
            acc += std::pow(std::abs(qf - ql), cfg.p);
        }
    }
    const double d = std::pow(acc / static_cast<double>(bands * (bands - 1)), 1.0 / cfg.p);
    return std::clamp(d, 0.0, 1.0);
}

/// Spatial distortion: change of band-to-PAN Q values, the PAN side degraded by wald_degrade.
inline double d_s(const RasterImage& fused, const RasterImage& lrms, const RasterImage& pan, int scale,
                  const QnrConfig& cfg = {}) {
    const auto s = static_cast<std::size_t>(scale);
    if (pan.channels != 1 || pan.height != fused.height || pan.width != fused.width || fused.channels != lrms.channels ||
        lrms.height * s != fused.height || lrms.width * s != fused.width) {
        throw ShapeError("d_s geometry mismatch: fused " + fused.shape_string() + ", LRMS " + lrms.shape_string() +
                         ", PAN " + pan.shape_string());
    }
    const auto pan_hr = pan.band(0);
    const auto pan_lr = wald_degrade(pan, scale).band(0);
    double acc = 0.0;
    for (std::size_t c = 0; c < fused.channels; ++c) {
        const double qh = q_blocks(fused.band(c), pan_hr, fused.height, fused.width, static_cast<std::size_t>(cfg.block));
        const double ql = q_blocks(lrms.band(c), pan_lr, lrms.height, lrms.width, lr_block(cfg, scale));
        acc += std::pow(std::abs(qh - ql), cfg.q);
    }
    const double d = std::pow(acc / static_cast<double>(fused.channels), 1.0 / cfg.q);
    return std::clamp(d, 0.0, 1.0);
}

inline double qnr(double d_lambda_value, double d_s_value, const QnrConfig& cfg = {}) {
    return std::pow(1.0 - d_lambda_value, cfg.alpha) * std::pow(1.0 - d_s_value, cfg.beta);
}

// ---------------------------------------------------------------------------
// Reports

/// Per-image metric rows plus column means.
class MetricReport {
public:
    explicit MetricReport(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add(const std::string& id, std::vector<double> values) {
        if (values.size() != columns_.size()) {
            throw ShapeError("metric row for " + id + " has " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(columns_.size()));
        }
        ids_.push_back(id);
        rows_.push_back(std::move(values));
    }

    const std::vector<std::string>& columns() const { return columns_; }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<std::vector<double>>& rows() const { return rows_; }
    std::size_t count() const { return rows_.size(); }

    std::vector<double> means() const {
        std::vector<double> m(columns_.size(), 0.0);
        if (rows_.empty()) return m;
        for (const auto& r : rows_) {
            for (std::size_t j = 0; j < r.size(); ++j) m[j] += r[j];
        }
        for (double& v : m) v /= static_cast<double>(rows_.size());
        return m;
    }

    double mean(const std::string& column) const {
        const auto it = std::find(columns_.begin(), columns_.end(), column);
        if (it == columns_.end()) throw Error("no metric column " + column);
        return means()[static_cast<std::size_t>(it - columns_.begin())];
    }

    /// `id,<columns...>` header, one row per image, then a MEAN row.
    void write_csv(std::ostream& os) const {
        os << "id";
        for (const auto& c : columns_) os << ',' << c;
        os << '\n';
        auto row = [&](const std::string& id, const std::vector<double>& v) {
            os << id;
            for (double x : v) os << ',' << std::setprecision(17) << x;
            os << '\n';
        };
        for (std::size_t i = 0; i < rows_.size(); ++i) row(ids_[i], rows_[i]);
        row("MEAN", means());
    }

private:
    std::vector<std::string> columns_;
    std::vector<std::string> ids_;
    std::vector<std::vector<double>> rows_;
};

} // namespace panflow::metrics
