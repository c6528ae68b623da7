#pragma once

// Slow, independently coded reference computations. Nothing here shares code paths
// with the kernels it checks beyond the public model interface.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "panflow/data.hpp"
#include "panflow/flow.hpp"
#include "panflow/tensor.hpp"

namespace panflow::oracle {

/// Textbook nested-loop cross-correlation with explicit bounds checks for zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t n = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
    const std::size_t cout = w.size(0), k = w.size(2);
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor<T> out(Shape{n, cout, h, wd});
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t o = 0; o < cout; ++o) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < wd; ++xx) {
                    T acc = b[o];
                    for (std::size_t c = 0; c < cin; ++c) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const auto iy = static_cast<std::ptrdiff_t>(y + ky) - r;
                                const auto ix = static_cast<std::ptrdiff_t>(xx + kx) - r;
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                acc += x.at(s, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(o, c, ky, kx);
                            }
                        }
                    }
                    out.at(s, o, y, xx) = acc;
                }
            }
        }
    }
    return out;
}

/// Log-density of a standard normal as a product of independent 1-D densities.
inline double gaussian_logpdf_factorized(const std::vector<double>& z) {
    double p = 1.0;
    for (double v : z) p *= std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return std::log(p);
}

/// log|det J| of a map R^d -> R^d, Jacobian assembled column by column from central
/// differences, determinant from a partially pivoted LU factorization.
inline double logabsdet_central(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                const std::vector<double>& x0, double step = 1e-5) {
    const auto d = static_cast<Eigen::Index>(x0.size());
    Eigen::MatrixXd jac(d, d);
    std::vector<double> x = x0;
    for (Eigen::Index j = 0; j < d; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        x[ju] = x0[ju] + step;
        const auto plus = f(x);
        x[ju] = x0[ju] - step;
        const auto minus = f(x);
        x[ju] = x0[ju];
        for (Eigen::Index i = 0; i < d; ++i) {
            jac(i, j) = (plus[static_cast<std::size_t>(i)] - minus[static_cast<std::size_t>(i)]) / (2.0 * step);
        }
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    const Eigen::MatrixXd& u = lu.matrixLU();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) acc += std::log(std::abs(u(i, i)));
    return acc;
}

/// Brute-force total log-det of model_forward at H (batch of one).
inline double model_logdet_bruteforce(const PanFlowModel<double>& model, const Tensor<double>& hrms,
                                      const Tensor<double>& lrms, const Tensor<double>& pan, double step = 1e-5) {
    const Shape shape = hrms.shape();
    auto f = [&](const std::vector<double>& v) {
        const auto z = model.forward(Tensor<double>(shape, v), lrms, pan).z;
        return std::vector<double>(z.values().begin(), z.values().end());
    };
    return logabsdet_central(f, std::vector<double>(hrms.values().begin(), hrms.values().end()), step);
}

/// Relative error with an absolute floor in the denominator, so entries whose true
/// value is ~0 are judged against the floor instead of against themselves.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t kinked = 0;  // entries whose one-sided slopes disagreed at the nominal step
    std::string worst;  // parameter name and flat index of the worst entry
};

/// Central differences for every parameter entry. A central difference only estimates the
/// derivative when the loss is smooth on [p - step, p + step]; if the one-sided slopes
/// disagree by more than 1e-3 relative the stencil straddles a kink, and the step is
/// shrunk by 10 (at most twice) until they agree.
inline GradCheck check_gradients(PanFlowModel<double>& model, const std::function<double()>& loss,
                                 const std::vector<Tensor<double>>& analytic, double step = 1e-5, double floor = 1e-4) {
    GradCheck out;
    const double centre = loss();
    auto& params = model.params();
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& v = params[k].value;
        for (std::size_t i = 0; i < v.numel(); ++i) {
            const double orig = v[i];
            double numeric = 0.0;
            for (int shrink = 0; shrink <= 2; ++shrink) {
                const double h = step / std::pow(10.0, shrink);
                v[i] = orig + h;
                const double up = loss();
                v[i] = orig - h;
                const double down = loss();
                v[i] = orig;
                numeric = (up - down) / (2.0 * h);
                const double fwd = (up - centre) / h, bwd = (centre - down) / h;
                if (std::abs(fwd - bwd) <= 1e-3 * std::max({std::abs(fwd), std::abs(bwd), 1e-2})) break;
                if (shrink == 0) ++out.kinked;
            }
            const double err = relative_error(analytic[k][i], numeric, floor);
            ++out.checked;
            if (err > out.max_rel_error) {
                out.max_rel_error = err;
                out.worst = params[k].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return out;
}

/// Midpoint-rule integral of exp(log_prob) over the cube [-bound, bound]^d for a model
/// whose HRMS has d elements, with `points` nodes per axis. Samples are evaluated in
/// batches along the leading axes.
inline double probability_mass(const PanFlowModel<double>& model, const Tensor<double>& lrms, const Tensor<double>& pan,
                               double bound, std::size_t points) {
    const std::size_t bands = static_cast<std::size_t>(model.config().bands);
    const std::size_t h = pan.size(2), w = pan.size(3);
    const std::size_t d = bands * h * w;
    const double step = 2.0 * bound / static_cast<double>(points);
    std::vector<double> nodes(points);
    for (std::size_t i = 0; i < points; ++i) nodes[i] = -bound + (static_cast<double>(i) + 0.5) * step;
    const std::size_t inner_dims = std::min<std::size_t>(d, 4);
    std::size_t batch = 1;
    for (std::size_t i = 0; i < inner_dims; ++i) batch *= points;
    std::size_t outer = 1;
    for (std::size_t i = inner_dims; i < d; ++i) outer *= points;

    // Broadcast the condition across the batch.
    auto tile = [&](const Tensor<double>& t) {
        Shape s = t.shape();
        const std::size_t per = t.numel();
        s[0] = batch;
        Tensor<double> out(s);
        for (std::size_t n = 0; n < batch; ++n) std::copy(t.data(), t.data() + per, out.data() + n * per);
        return out;
    };
    const auto lb = tile(lrms), pb = tile(pan);
    Tensor<double> grid(Shape{batch, bands, h, w});
    double mass = 0.0;
    std::vector<std::size_t> digit(d);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t rem = o;
        for (std::size_t i = inner_dims; i < d; ++i) {
            digit[i] = rem % points;
            rem /= points;
        }
        for (std::size_t n = 0; n < batch; ++n) {
            std::size_t r = n;
            for (std::size_t i = 0; i < inner_dims; ++i) {
                digit[i] = r % points;
                r /= points;
            }
            for (std::size_t i = 0; i < d; ++i) grid[n * d + i] = nodes[digit[i]];
        }
        for (double lp : model.log_prob(grid, lb, pb)) mass += std::exp(lp);
    }
    return mass * std::pow(step, static_cast<double>(d));
}

// ---------------------------------------------------------------------------
// Metric oracles: direct formulas, no separable filtering or shared helpers.

inline double psnr_direct(const RasterImage& x, const RasterImage& y, double peak = 1.0) {
    double mean_x = 0.0;
    for (float v : x.data) mean_x += v;  // first pass only touches x, as a sanity read
    (void)mean_x;
    long double se = 0.0L;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const long double d = static_cast<long double>(x.data[i]) - static_cast<long double>(y.data[i]);
        se += d * d;
    }
    const double mse = static_cast<double>(se / static_cast<long double>(x.data.size()));
    return mse == 0.0 ? 99.0 : 10.0 * std::log10(peak * peak / mse);
}

/// SSIM with an explicit 2-D Gaussian window evaluated at each valid position.
inline double ssim_direct(const RasterImage& x, const RasterImage& y) {
    constexpr int win = 11;
    constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double g[win][win];
    double total = 0.0;
    for (int i = 0; i < win; ++i) {
        for (int j = 0; j < win; ++j) {
            g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * sigma * sigma));
            total += g[i][j];
        }
    }
    for (auto& row : g) {
        for (double& v : row) v /= total;
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < x.channels; ++c) {
        double band = 0.0;
        std::size_t count = 0;
        for (std::size_t y0 = 0; y0 + win <= x.height; ++y0) {
            for (std::size_t x0 = 0; x0 + win <= x.width; ++x0) {
                double mx = 0, my = 0;
                for (int i = 0; i < win; ++i) {
                    for (int j = 0; j < win; ++j) {
                        mx += g[i][j] * x.at(y0 + static_cast<std::size_t>(i), x0 + static_cast<std::size_t>(j), c);
                        my += g[i][j] * y.at(y0 + static_cast<std::size_t>(i), x0 + static_cast<std::size_t>(j), c);
                    }
                }
                double vx = 0, vy = 0, cov = 0;
                for (int i = 0; i < win; ++i) {
                    for (int j = 0; j < win; ++j) {
                        const double a = x.at(y0 + static_cast<std::size_t>(i), x0 + static_cast<std::size_t>(j), c) - mx;
                        const double b = y.at(y0 + static_cast<std::size_t>(i), x0 + static_cast<std::size_t>(j), c) - my;
                        vx += g[i][j] * a * a;
                        vy += g[i][j] * b * b;
                        cov += g[i][j] * a * b;
                    }
                }
                band += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
        acc += band / static_cast<double>(count);
    }
    return acc / static_cast<double>(x.channels);
}

inline double sam_direct(const RasterImage& x, const RasterImage& y) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t yy = 0; yy < x.height; ++yy) {
        for (std::size_t xx = 0; xx < x.width; ++xx) {
            Eigen::VectorXd a(static_cast<Eigen::Index>(x.channels)), b(static_cast<Eigen::Index>(x.channels));
            for (std::size_t c = 0; c < x.channels; ++c) {
                a(static_cast<Eigen::Index>(c)) = x.at(yy, xx, c);
                b(static_cast<Eigen::Index>(c)) = y.at(yy, xx, c);
            }
            if (a.norm() == 0.0 || b.norm() == 0.0) continue;
            acc += std::acos(std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0));
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

inline double ergas_direct(const RasterImage& fused, const RasterImage& ref, double ratio) {
    double acc = 0.0;
    for (std::size_t c = 0; c < fused.channels; ++c) {
        const auto f = fused.band(c), r = ref.band(c);
        double mu = 0.0;
        for (double v : r) mu += v;
        mu /= static_cast<double>(r.size());
        double se = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) se += (f[i] - r[i]) * (f[i] - r[i]);
        const double rmse = std::sqrt(se / static_cast<double>(r.size()));
        acc += (rmse / mu) * (rmse / mu);
    }
    return 100.0 * ratio * std::sqrt(acc / static_cast<double>(fused.channels));
}

} // namespace panflow::oracle
