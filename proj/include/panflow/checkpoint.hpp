#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "panflow/data.hpp"
#include "panflow/errors.hpp"
#include "panflow/flow.hpp"

namespace panflow {

// Layout (little-endian):
//   "PFNM" | u16 version | config | u32 tensor count |
//   per tensor: u16 name length, name, u8 rank, u32 extents..., f32 values |
//   u32 CRC-32 of every preceding byte
inline constexpr char kModelMagic[4] = {'P', 'F', 'N', 'M'};
inline constexpr std::uint16_t kModelVersion = 1;

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in pieces.
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

template <class T>
std::vector<unsigned char> encode_checkpoint(const PanFlowModel<T>& model) {
    io::Writer w;
    w.put_bytes(kModelMagic, 4);
    w.put<std::uint16_t>(kModelVersion);
    const ModelConfig& c = model.config();
    w.put<std::int32_t>(c.bands);
    w.put<std::int32_t>(c.scale);
    w.put<std::int32_t>(c.blocks);
    w.put<std::uint8_t>(c.share_params ? 1 : 0);
    w.put<std::int32_t>(c.hidden_channels);
    w.put<double>(c.clamp_alpha);
    w.put<std::uint8_t>(c.use_lrms ? 1 : 0);
    w.put<std::uint8_t>(c.use_pan ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
    for (const auto& p : model.params()) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
        w.put_bytes(p.name.data(), p.name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.dim()));
        for (std::size_t d : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        for (T v : p.value.values()) w.put<float>(static_cast<float>(v));
    }
    const auto& bytes = w.bytes();
    w.put<std::uint32_t>(crc32_of(bytes.data(), bytes.size()));
    return w.bytes();
}

/// Parses and validates a checkpoint. The stored tensors must match, name for name and
/// shape for shape, the model the stored config builds.
template <class T>
PanFlowModel<T> decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what = "checkpoint") {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
        throw FormatError(bytes.size() < 4 ? FormatError::Code::truncated : FormatError::Code::bad_magic,
                          what + ": not a PFNM checkpoint");
    }
    if (bytes.size() < 10) throw FormatError(FormatError::Code::truncated, what + ": truncated checkpoint");
    {
        std::vector<unsigned char> last(bytes.end() - 4, bytes.end());
        io::Reader crc_reader(last, what);
        const auto stored = crc_reader.get<std::uint32_t>();
        if (stored != crc32_of(bytes.data(), bytes.size() - 4)) {
            throw FormatError(FormatError::Code::checksum_mismatch, what + ": checksum mismatch (file corrupted)");
        }
    }
    std::vector<unsigned char> body(bytes.begin(), bytes.end() - 4);
    io::Reader r(body, what);
    char magic[4];
    r.get_bytes(magic, 4);
    const auto version = r.get<std::uint16_t>();
    if (version != kModelVersion) {
        throw FormatError(FormatError::Code::unsupported_version, what + ": unsupported PFNM version " + std::to_string(version));
    }
    ModelConfig c;
    c.bands = r.get<std::int32_t>();
    c.scale = r.get<std::int32_t>();
    c.blocks = r.get<std::int32_t>();
    c.share_params = r.get<std::uint8_t>() != 0;
    c.hidden_channels = r.get<std::int32_t>();
    c.clamp_alpha = r.get<double>();
    c.use_lrms = r.get<std::uint8_t>() != 0;
    c.use_pan = r.get<std::uint8_t>() != 0;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(FormatError::Code::malformed, what + ": invalid stored config: " + e.what());
    }
    PanFlowModel<T> model(c);
    const auto count = r.get<std::uint32_t>();
    if (count != model.params().size()) {
        throw FormatError(FormatError::Code::malformed, what + ": " + std::to_string(count) + " tensors stored, model has " +
                                                            std::to_string(model.params().size()));
    }
    for (auto& p : model.params()) {
        const auto len = r.get<std::uint16_t>();
        std::string name(len, '\0');
        r.get_bytes(name.data(), len);
        if (name != p.name) {
            throw FormatError(FormatError::Code::malformed, what + ": expected tensor " + p.name + ", found " + name);
        }
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint32_t>();
        if (shape != p.value.shape()) {
            throw FormatError(FormatError::Code::bad_dimensions,
                              what + ": tensor " + name + " has shape " + shape_str(shape) + ", expected " + shape_str(p.value.shape()));
        }
        for (auto& v : p.value.storage()) v = static_cast<T>(r.get<float>());
        p.zero_grad();
    }
    if (r.remaining() != 0) {
        throw FormatError(FormatError::Code::malformed, what + ": " + std::to_string(r.remaining()) + " unexpected trailing bytes");
    }
    return model;
}

template <class T>
void save_checkpoint(const PanFlowModel<T>& model, const std::filesystem::path& path) {
    io::write_file(path, encode_checkpoint(model));
}

template <class T = float>
PanFlowModel<T> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(io::read_file(path), path.string());
}

} // namespace panflow
