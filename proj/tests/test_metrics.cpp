#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "panflow/metrics.hpp"
#include "panflow/oracles.hpp"
#include "panflow/verify.hpp"

using namespace panflow;
using verify::random_image;

namespace {

RasterImage wave(double phase, double amp) {
    RasterImage img(24, 24, 2);
    for (std::size_t y = 0; y < 24; ++y)
        for (std::size_t x = 0; x < 24; ++x)
            for (std::size_t b = 0; b < 2; ++b) {
                const double arg = (phase == 0.0 ? 0.21 : 0.2) * static_cast<double>(y) +
                                   (phase == 0.0 ? 0.33 : 0.35) * static_cast<double>(x) + 1.1 * static_cast<double>(b) + phase;
                img.at(y, x, b) = static_cast<float>(0.5 + amp * std::sin(arg));
            }
    return img;
}

RasterImage add_noise(const RasterImage& x, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    auto y = x;
    for (auto& v : y.data) v = static_cast<float>(v + n(rng));
    return y;
}

RasterImage upsample_nearest(const RasterImage& img, std::size_t s) {
    RasterImage out(img.height * s, img.width * s, img.channels);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y / s, x / s, c);
    return out;
}

} // namespace

TEST(Metrics, FrozenValues) {
    // tests/oracles/frozen_values.py: x = 0.5 + 0.4 sin(.), z = 0.5 + 0.35 sin(. + 0.3), float32 rasters.
    const auto x = wave(0.0, 0.4), z = wave(0.3, 0.35);
    EXPECT_NEAR(metrics::psnr(x, z), 18.314992831517696, 1e-9);
    EXPECT_NEAR(metrics::ssim(x, z), 0.8321289739481099, 1e-9);
    EXPECT_NEAR(metrics::sam(x, z), 0.13311157036953458, 1e-9);
    EXPECT_NEAR(metrics::ergas(z, x, 0.25), 6.157764917261591, 1e-9);
}

TEST(Metrics, IdealValuesOnIdenticalImages) {
    std::mt19937_64 rng(1);
    const auto x = random_image(20, 20, 3, rng);
    EXPECT_EQ(metrics::psnr(x, x), 99.0);
    EXPECT_NEAR(metrics::ssim(x, x), 1.0, 1e-12);
    EXPECT_EQ(metrics::sam(x, x), 0.0);
    EXPECT_EQ(metrics::ergas(x, x), 0.0);
}

TEST(Metrics, ExactExamples) {
    EXPECT_DOUBLE_EQ(metrics::psnr_from_mse(0.01), 20.0);
    const RasterImage a(4, 4, 1, 0.0f), b(4, 4, 1, 0.25f);
    EXPECT_DOUBLE_EQ(metrics::psnr(a, b, 2.5), 20.0);
    const RasterImage o1(2, 2, 2, std::vector<float>{1, 0, 1, 0, 1, 0, 1, 0});
    const RasterImage o2(2, 2, 2, std::vector<float>{0, 1, 0, 1, 0, 1, 0, 1});
    EXPECT_NEAR(metrics::sam(o1, o2), std::numbers::pi / 2.0, 1e-15);
    const RasterImage ref(2, 2, 1, std::vector<float>{1, 1, 1, 1}), fus(2, 2, 1, std::vector<float>{0, 2, 0, 2});
    EXPECT_DOUBLE_EQ(metrics::ergas(fus, ref, 0.25), 25.0);
    const auto v = verify::metric_identities(1e-10);
    EXPECT_TRUE(v.pass) << v.measured << " " << v.note;
}

TEST(Metrics, AgreeWithDirectOracles) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 3; ++trial) {
        const auto x = random_image(16, 18, 4, rng);
        const auto y = add_noise(x, 0.05 * (trial + 1), static_cast<std::uint64_t>(trial));
        EXPECT_NEAR(metrics::psnr(x, y), oracle::psnr_direct(x, y), 1e-10);
        EXPECT_NEAR(metrics::ssim(x, y), oracle::ssim_direct(x, y), 1e-10);
        EXPECT_NEAR(metrics::sam(x, y), oracle::sam_direct(x, y), 1e-10);
        EXPECT_NEAR(metrics::ergas(y, x, 0.25), oracle::ergas_direct(y, x, 0.25), 1e-10);
    }
}

TEST(Metrics, SymmetryAndErgasAsymmetry) {
    std::mt19937_64 rng(3);
    const auto x = random_image(16, 16, 3, rng), y = random_image(16, 16, 3, rng);
    EXPECT_DOUBLE_EQ(metrics::psnr(x, y), metrics::psnr(y, x));
    EXPECT_NEAR(metrics::ssim(x, y), metrics::ssim(y, x), 1e-14);
    EXPECT_NEAR(metrics::sam(x, y), metrics::sam(y, x), 1e-14);
    // Same RMSE, different reference means.
    const RasterImage lo(2, 2, 1, 0.2f), hi(2, 2, 1, 0.4f);
    EXPECT_GT(std::abs(metrics::ergas(lo, hi) - metrics::ergas(hi, lo)), 1.0);
}

TEST(Metrics, MonotoneUnderGrowingNoise) {
    std::mt19937_64 rng(4);
    const auto x = random_image(32, 32, 2, rng, 0.2);
    double last_psnr = 1e9, last_ssim = 2.0;
    for (double sigma : {0.01, 0.05, 0.2}) {
        const auto y = add_noise(x, sigma, 7);
        EXPECT_LT(metrics::psnr(x, y), last_psnr);
        EXPECT_LT(metrics::ssim(x, y), last_ssim);
        last_psnr = metrics::psnr(x, y);
        last_ssim = metrics::ssim(x, y);
    }
}

TEST(Metrics, InvertedImageLowersSsim) {
    std::mt19937_64 rng(5);
    const auto x = random_image(16, 16, 1, rng);
    auto inv = x;
    for (auto& v : inv.data) v = 1.0f - v;
    EXPECT_LT(metrics::ssim(x, inv), 1.0);
}

TEST(Metrics, SamSkipsZeroSpectra) {
    RasterImage a(1, 2, 2, std::vector<float>{0, 0, 1, 0}), b(1, 2, 2, std::vector<float>{0.5f, 0.5f, 0, 1});
    const auto r = metrics::sam_detail(a, b);
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_NEAR(r.radians, std::numbers::pi / 2.0, 1e-15);
}

TEST(Metrics, Errors) {
    EXPECT_THROW(metrics::psnr(RasterImage(2, 2, 1), RasterImage(2, 3, 1)), ShapeError);
    EXPECT_THROW(metrics::ergas(RasterImage(2, 2, 1, 0.5f), RasterImage(2, 2, 1, 0.0f)), Error);
    EXPECT_THROW(metrics::ssim(RasterImage(4, 4, 1), RasterImage(4, 4, 1)), ShapeError);
}

TEST(Qnr, ValuesAndMonotonicity) {
    EXPECT_EQ(metrics::qnr(0.0, 0.0), 1.0);
    // tests/oracles/frozen_values.py
    EXPECT_NEAR(metrics::qnr(0.0746, 0.1164), 0.8176834399999999, 1e-15);
    for (double a = 0.0; a < 0.95; a += 0.1) {
        EXPECT_GT(metrics::qnr(a, 0.2), metrics::qnr(a + 0.05, 0.2));
        EXPECT_GT(metrics::qnr(0.2, a), metrics::qnr(0.2, a + 0.05));
    }
}

TEST(Qnr, DefinitionalZeroAndRange) {
    std::mt19937_64 rng(6);
    const auto lrms = random_image(8, 8, 3, rng);
    // Nearest upsampling by 4 with 8 x 8 blocks reproduces the LR block moments exactly.
    const auto fused = upsample_nearest(lrms, 4);
    metrics::QnrConfig cfg;
    cfg.block = 8;
    EXPECT_NEAR(metrics::d_lambda(fused, lrms, 4, cfg), 0.0, 1e-12);
    const auto noisy = add_noise(fused, 0.1, 3);
    const double dl = metrics::d_lambda(noisy, lrms, 4, cfg);
    EXPECT_GT(dl, 0.0);
    EXPECT_LE(dl, 1.0);
    const auto pan = random_image(32, 32, 1, rng);
    const double ds = metrics::d_s(noisy, lrms, pan, 4, cfg);
    EXPECT_GE(ds, 0.0);
    EXPECT_LE(ds, 1.0);
    EXPECT_THROW(metrics::d_lambda(fused, lrms, 2, cfg), ShapeError);
    EXPECT_THROW(metrics::d_s(fused, lrms, RasterImage(32, 32, 2), 4, cfg), ShapeError);
}

TEST(Qnr, QIndexProperties) {
    const std::vector<double> a = {0.1, 0.4, 0.3, 0.9}, b = {0.2, 0.1, 0.8, 0.5};
    EXPECT_NEAR(metrics::q_index(a.data(), a.data(), 4), 1.0, 1e-15);
    EXPECT_NEAR(metrics::q_index(a.data(), b.data(), 4), metrics::q_index(b.data(), a.data(), 4), 1e-15);
    EXPECT_LT(metrics::q_index(a.data(), b.data(), 4), 1.0);
}

TEST(MetricReport, MeanRowAndCsv) {
    metrics::MetricReport r({"psnr", "ssim"});
    r.add("a", {30.0, 0.9});
    r.add("b", {20.0, 0.7});
    EXPECT_DOUBLE_EQ(r.mean("psnr"), 25.0);
    EXPECT_DOUBLE_EQ(r.mean("ssim"), 0.8);
    EXPECT_THROW(r.add("c", {1.0}), ShapeError);
    EXPECT_THROW(r.mean("sam"), Error);
    std::ostringstream os;
    r.write_csv(os);
    EXPECT_EQ(os.str(), "id,psnr,ssim\na,30,0.90000000000000002\nb,20,0.69999999999999996\nMEAN,25,0.80000000000000004\n");
}
