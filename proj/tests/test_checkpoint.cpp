#include <filesystem>

#include <gtest/gtest.h>
#include <zlib.h>

#include "panflow/checkpoint.hpp"
#include "panflow/verify.hpp"

using namespace panflow;

namespace {

ModelConfig odd_config() {
    ModelConfig c;
    c.bands = 6;
    c.scale = 2;
    c.blocks = 3;
    c.share_params = false;
    c.hidden_channels = 6;
    c.clamp_alpha = 1.5;
    c.use_pan = false;
    return c;
}

FormatError::Code decode_code(const std::vector<unsigned char>& bytes) {
    try {
        decode_checkpoint<float>(bytes);
    } catch (const FormatError& e) {
        return e.code();
    }
    ADD_FAILURE() << "checkpoint was accepted";
    return FormatError::Code::io;
}

// Rewrites the trailer so only the targeted field is wrong.
void reseal(std::vector<unsigned char>& bytes) {
    const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
    for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] = static_cast<unsigned char>(crc >> (8 * i));
}

} // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    PanFlowModel<float> model(odd_config(), 5);
    randomize_parameters(model, 6, 0.3);
    const auto bytes = encode_checkpoint(model);
    const auto back = decode_checkpoint<float>(bytes);
    EXPECT_EQ(back.config(), model.config());
    ASSERT_EQ(back.params().size(), model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        EXPECT_EQ(back.params()[i].name, model.params()[i].name);
        EXPECT_EQ(back.params()[i].value, model.params()[i].value);
    }
    EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTripAndDoubleLoad) {
    const auto dir = std::filesystem::temp_directory_path() / "panflow_test_checkpoint";
    std::filesystem::create_directories(dir);
    PanFlowModel<float> model(odd_config(), 7);
    randomize_parameters(model, 8, 0.2);
    save_checkpoint(model, dir / "m.pfnm");
    const auto as_double = load_checkpoint<double>(dir / "m.pfnm");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        EXPECT_EQ(as_double.params()[i].value.cast<float>(), model.params()[i].value);
    }
    EXPECT_EQ(encode_checkpoint(as_double), io::read_file(dir / "m.pfnm"));
    EXPECT_TRUE(verify::checkpoint_integrity(dir / "m.pfnm").pass);
}

TEST(Checkpoint, StartsWithMagicAndEndsWithCrc) {
    const auto bytes = encode_checkpoint(PanFlowModel<float>(odd_config(), 1));
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PFNM");
    std::vector<unsigned char> copy = bytes;
    reseal(copy);
    EXPECT_EQ(copy, bytes);
}

TEST(Checkpoint, CorruptionGivesStructuredErrors) {
    PanFlowModel<float> model(odd_config(), 2);
    randomize_parameters(model, 3, 0.1);
    const auto bytes = encode_checkpoint(model);

    auto flipped = bytes;
    flipped[bytes.size() / 3] ^= 0x01;
    EXPECT_EQ(decode_code(flipped), FormatError::Code::checksum_mismatch);

    auto magic = bytes;
    magic[0] = 'Z';
    EXPECT_EQ(decode_code(magic), FormatError::Code::bad_magic);

    auto version = bytes;
    version[4] = 7;
    reseal(version);
    EXPECT_EQ(decode_code(version), FormatError::Code::unsupported_version);

    auto bands = bytes;
    bands[6] = 3;  // odd band count
    reseal(bands);
    EXPECT_EQ(decode_code(bands), FormatError::Code::malformed);

    EXPECT_EQ(decode_code(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 2)), FormatError::Code::truncated);
    EXPECT_EQ(decode_code(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 7)), FormatError::Code::truncated);
    auto cut = std::vector<unsigned char>(bytes.begin(), bytes.end() - 40);
    cut.resize(cut.size() + 4);
    reseal(cut);
    EXPECT_EQ(decode_code(cut), FormatError::Code::truncated);

    const auto report = verify::serialization(std::filesystem::temp_directory_path() / "panflow_test_serial");
    EXPECT_TRUE(report.pass) << report.note;
}

TEST(Checkpoint, MissingFileIsIoError) {
    try {
        load_checkpoint<float>("/nonexistent/dir/model.pfnm");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.code(), FormatError::Code::io);
    }
}
