#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "panflow/data.hpp"
#include "panflow/verify.hpp"

using namespace panflow;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("panflow_test_data_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

double mean_of(const RasterImage& img) {
    return std::accumulate(img.data.begin(), img.data.end(), 0.0) / static_cast<double>(img.data.size());
}

RasterImage from_fn(std::size_t h, std::size_t w, std::size_t c, const std::function<double(std::size_t, std::size_t, std::size_t)>& f) {
    RasterImage img(h, w, c);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t b = 0; b < c; ++b) img.at(y, x, b) = static_cast<float>(f(y, x, b));
    return img;
}

FormatError::Code decode_code(const std::vector<unsigned char>& bytes) {
    try {
        decode_raster(bytes);
    } catch (const FormatError& e) {
        return e.code();
    }
    ADD_FAILURE() << "raster was accepted";
    return FormatError::Code::io;
}

} // namespace

TEST(Synth, DegenerateConfigIsMidGray) {
    SyntheticSceneConfig c;
    c.size = 16;
    c.rectangles = 0;
    c.gradients = 0;
    c.octaves = 0;
    const auto img = synth_scene(c);
    for (float v : img.data) EXPECT_EQ(v, 0.5f);
}

TEST(Synth, DeterministicAndInRange) {
    SyntheticSceneConfig c;
    c.seed = 42;
    const auto a = synth_scene(c), b = synth_scene(c);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.height, 128u);
    EXPECT_EQ(a.channels, 4u);
    for (float v : a.data) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
    c.seed = 43;
    EXPECT_FALSE(synth_scene(c) == a);
}

TEST(Synth, BandsAreNonDegenerate) {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        SyntheticSceneConfig c;
        c.seed = seed;
        const auto img = synth_scene(c);
        for (std::size_t b = 0; b < img.channels; ++b) {
            const auto band = img.band(b);
            const double m = std::accumulate(band.begin(), band.end(), 0.0) / static_cast<double>(band.size());
            double var = 0.0;
            for (double v : band) var += (v - m) * (v - m);
            EXPECT_GT(std::sqrt(var / static_cast<double>(band.size())), 0.01) << "seed " << seed << " band " << b;
        }
    }
}

TEST(Synth, RejectsInvalidConfig) {
    SyntheticSceneConfig c;
    c.size = 0;
    EXPECT_THROW(synth_scene(c), ConfigError);
    c.size = 8;
    c.octaves = -1;
    EXPECT_THROW(synth_scene(c), ConfigError);
}

TEST(Pan, WeightedSums) {
    const auto h = from_fn(3, 3, 2, [](std::size_t, std::size_t, std::size_t b) { return b == 0 ? 0.2 : 0.8; });
    for (float v : pan_from_hrms(h, {0.5, 0.5}).data) EXPECT_NEAR(v, 0.5f, 1e-7);
    std::mt19937_64 rng(1);
    const auto r = verify::random_image(5, 5, 3, rng, 0.0);
    const auto one_hot = pan_from_hrms(r, {0.0, 1.0, 0.0});
    for (std::size_t i = 0; i < r.pixels(); ++i) EXPECT_EQ(one_hot.data[i], r.at(i / 5, i % 5, 1));
    const auto p = pan_from_hrms(r, {0.2, 0.3, 0.5});
    for (std::size_t i = 0; i < r.pixels(); ++i) {
        const float lo = std::min({r.data[3 * i], r.data[3 * i + 1], r.data[3 * i + 2]});
        const float hi = std::max({r.data[3 * i], r.data[3 * i + 1], r.data[3 * i + 2]});
        EXPECT_GE(p.data[i], lo - 1e-6f);
        EXPECT_LE(p.data[i], hi + 1e-6f);
    }
}

TEST(Pan, RejectsBadWeights) {
    const RasterImage h(2, 2, 2, 0.3f);
    EXPECT_THROW(pan_from_hrms(h, {1.0}), ConfigError);
    EXPECT_THROW(pan_from_hrms(h, {0.7, 0.7}), ConfigError);
    EXPECT_THROW(pan_from_hrms(h, {1.5, -0.5}), ConfigError);
}

TEST(Wald, ConstantImageStaysConstant) {
    const RasterImage img(16, 16, 3, 0.37f);
    const auto low = wald_degrade(img, 4);
    EXPECT_EQ(low.height, 4u);
    for (float v : low.data) EXPECT_NEAR(v, 0.37f, 1e-6);
}

TEST(Wald, GeometryAndMeanPreservation) {
    SyntheticSceneConfig c;
    c.seed = 5;
    const auto h = synth_scene(c);
    const auto l = wald_degrade(h, 4);
    EXPECT_EQ(l.height, 32u);
    EXPECT_EQ(l.width, 32u);
    EXPECT_EQ(l.channels, 4u);
    EXPECT_NEAR(mean_of(l), mean_of(h), 1e-3);
}

TEST(Wald, FrozenValues) {
    // tests/oracles/frozen_values.py (SciPy correlate1d, mode "mirror").
    const auto img = from_fn(8, 8, 1, [](std::size_t y, std::size_t x, std::size_t) { return static_cast<double>((y * 8 + x) % 7) / 7.0; });
    const auto low = wald_degrade(img, 2);
    EXPECT_NEAR(low.at(0, 0, 0), 0.2593335509300232, 1e-6);
    EXPECT_NEAR(low.at(2, 3, 0), 0.5051215291023254, 1e-6);
    EXPECT_NEAR(std::accumulate(low.data.begin(), low.data.end(), 0.0), 6.839086443185806, 1e-5);
}

TEST(Wald, ShiftEquivariantUnderWrap) {
    std::mt19937_64 rng(3);
    const auto img = verify::random_image(16, 16, 2, rng, 0.0);
    const std::size_t s = 4, dy = 8, dx = 4;
    RasterImage shifted(16, 16, 2);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
            for (std::size_t b = 0; b < 2; ++b) shifted.at((y + dy) % 16, (x + dx) % 16, b) = img.at(y, x, b);
    const auto a = wald_degrade(img, static_cast<int>(s), BorderMode::wrap);
    const auto b = wald_degrade(shifted, static_cast<int>(s), BorderMode::wrap);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(b.at((y + dy / s) % 4, (x + dx / s) % 4, c), a.at(y, x, c), 1e-6);
}

TEST(Wald, RejectsIndivisibleSize) {
    EXPECT_THROW(wald_degrade(RasterImage(10, 8, 1), 4), ShapeError);
    EXPECT_THROW(wald_degrade(RasterImage(8, 8, 1), 0), ConfigError);
}

TEST(Wald, KernelTaps) {
    const auto k = gaussian_kernel(2.0);
    EXPECT_EQ(k.size(), 9u);
    EXPECT_NEAR(std::accumulate(k.begin(), k.end(), 0.0), 1.0, 1e-15);
    EXPECT_EQ(border_index(-1, 5, BorderMode::reflect), 1);
    EXPECT_EQ(border_index(5, 5, BorderMode::reflect), 3);
    EXPECT_EQ(border_index(-1, 5, BorderMode::wrap), 4);
}

TEST(Triple, GeometryAndDeterminism) {
    SyntheticSceneConfig c;
    c.seed = 8;
    const auto h = synth_scene(c);
    const auto t = make_triple(h, TripleConfig{4, {}}, "x");
    EXPECT_EQ(t.hrms.height, 128u);
    EXPECT_EQ(t.lrms.height, 32u);
    EXPECT_EQ(t.pan.height, 128u);
    EXPECT_EQ(t.pan.channels, 1u);
    const auto again = make_triple(h, TripleConfig{4, {}}, "x");
    EXPECT_EQ(t.lrms, again.lrms);
    EXPECT_EQ(t.pan, again.pan);

    const auto flat = make_triple(RasterImage(8, 8, 2, 0.6f), TripleConfig{2, {}});
    for (float v : flat.lrms.data) EXPECT_NEAR(v, 0.6f, 1e-6);
    for (float v : flat.pan.data) EXPECT_NEAR(v, 0.6f, 1e-6);
}

TEST(Triple, SynthesizedSubsetsAreIndependentOfCount) {
    SyntheticSceneConfig c;
    c.size = 16;
    c.seed = 3;
    const auto few = synthesize_triples(2, c, 4);
    const auto many = synthesize_triples(5, c, 4);
    EXPECT_EQ(few[1].hrms, many[1].hrms);
    EXPECT_EQ(few[1].id, "scene_0001");
    EXPECT_TRUE(synthesize_triples(0, c, 4).empty());
}

TEST(Bicubic, FrozenValues) {
    // tests/oracles/frozen_values.py (Keys a = -0.5, half-pixel centers, clamped taps).
    const auto img = from_fn(4, 4, 1, [](std::size_t y, std::size_t x, std::size_t) {
        return 0.2 + 0.15 * static_cast<double>(y) + 0.1 * static_cast<double>((x * x) % 3);
    });
    const auto up = bicubic_upsample(img, 2);
    EXPECT_EQ(up.height, 8u);
    EXPECT_NEAR(up.at(0, 0, 0), 0.18242187798023224, 1e-6);
    EXPECT_NEAR(up.at(5, 2, 0), 0.6207031607627869, 1e-6);
    EXPECT_NEAR(std::accumulate(up.data.begin(), up.data.end(), 0.0), 30.43749976158142, 1e-5);
}

TEST(Bicubic, ConstantAndIdentity) {
    for (float v : bicubic_upsample(RasterImage(3, 5, 2, 0.25f), 4).data) EXPECT_NEAR(v, 0.25f, 1e-6);
    std::mt19937_64 rng(2);
    const auto img = verify::random_image(6, 6, 2, rng, 0.0);
    EXPECT_EQ(bicubic_upsample(img, 1), img);
}

TEST(Raster, RoundTripIsBitExact) {
    const auto dir = scratch("raster");
    std::mt19937_64 rng(9);
    const auto img = verify::random_image(7, 5, 3, rng, 0.0);
    write_raster(img, dir / "a.pfnr");
    const auto back = read_raster(dir / "a.pfnr");
    EXPECT_EQ(back, img);
    write_raster(back, dir / "b.pfnr");
    EXPECT_EQ(io::read_file(dir / "a.pfnr"), io::read_file(dir / "b.pfnr"));
    EXPECT_EQ(io::read_file(dir / "a.pfnr").size(), 4u + 2u + 12u + 7u * 5u * 3u * 4u);
}

TEST(Raster, DistinctStructuredErrors) {
    std::mt19937_64 rng(10);
    const auto bytes = encode_raster(verify::random_image(4, 4, 2, rng, 0.0));
    auto magic = bytes;
    magic[1] = 'Q';
    EXPECT_EQ(decode_code(magic), FormatError::Code::bad_magic);
    auto version = bytes;
    version[4] = 9;
    EXPECT_EQ(decode_code(version), FormatError::Code::unsupported_version);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    EXPECT_EQ(decode_code(cut), FormatError::Code::truncated);
    EXPECT_EQ(decode_code(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 3)), FormatError::Code::truncated);
    auto zero = bytes;
    zero[6] = zero[7] = zero[8] = zero[9] = 0;
    EXPECT_EQ(decode_code(zero), FormatError::Code::bad_dimensions);
    auto huge = bytes;
    for (std::size_t i = 6; i < 18; ++i) huge[i] = 0xff;
    EXPECT_EQ(decode_code(huge), FormatError::Code::bad_dimensions);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_EQ(decode_code(trailing), FormatError::Code::malformed);
    EXPECT_THROW(encode_raster(RasterImage(0, 3, 1)), FormatError);
    try {
        read_raster(scratch("missing") / "nope.pfnr");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.code(), FormatError::Code::io);
    }
}

TEST(Raster, WriteClampsToUnitRange) {
    RasterImage img(1, 2, 1, std::vector<float>{-0.5f, 1.5f});
    const auto back = decode_raster(encode_raster(img));
    EXPECT_EQ(back.data[0], 0.0f);
    EXPECT_EQ(back.data[1], 1.0f);
}

TEST(Manifest, RoundTripResolvesToSameDataset) {
    const auto dir = scratch("manifest");
    SyntheticSceneConfig c;
    c.size = 16;
    c.seed = 11;
    const auto triples = synthesize_triples(3, c, 4);
    write_dataset(dir, triples, "test", 11);
    const auto m = read_manifest(dir / "manifest.tsv");
    EXPECT_EQ(m.split, "test");
    EXPECT_EQ(m.seed, 11u);
    ASSERT_EQ(m.entries.size(), 3u);
    const auto loaded = load_dataset(m, 4);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(loaded[i].id, triples[i].id);
        EXPECT_EQ(loaded[i].hrms, triples[i].hrms);
        EXPECT_EQ(loaded[i].lrms, triples[i].lrms);
        EXPECT_EQ(loaded[i].pan, triples[i].pan);
    }
    EXPECT_THROW(load_dataset(m, 2), ShapeError);
}

TEST(Manifest, RejectsMalformedLines) {
    auto code = [](const std::string& text) {
        std::istringstream in(text);
        try {
            parse_manifest(in);
        } catch (const FormatError& e) {
            return e.code();
        }
        return FormatError::Code::io;
    };
    EXPECT_EQ(code("a\tb\tc\n"), FormatError::Code::malformed);
    EXPECT_EQ(code("a\th\tl\tp\na\th\tl\tp\n"), FormatError::Code::malformed);
    EXPECT_EQ(code("# seed: x\n"), FormatError::Code::malformed);
    std::istringstream ok("# comment\n\nid1\th.pfnr\tl.pfnr\tp.pfnr\n");
    EXPECT_EQ(parse_manifest(ok, "/base").entries.at(0).hrms, std::filesystem::path("/base/h.pfnr"));
}

TEST(Tensors, RasterTensorConversion) {
    std::mt19937_64 rng(12);
    const auto img = verify::random_image(3, 4, 2, rng, 0.0);
    const auto t = to_tensor<double>(img);
    EXPECT_EQ(t.shape(), (Shape{1, 2, 3, 4}));
    EXPECT_EQ(t.at(0, 1, 2, 3), static_cast<double>(img.at(2, 3, 1)));
    EXPECT_EQ(from_tensor(t), img);
}
