#pragma once

#include <stdexcept>
#include <string>

namespace panflow {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents or image geometry do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid model, training or scene configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Failure while reading or writing a raster, checkpoint or manifest.
class FormatError : public Error {
public:
    enum class Code {
        io,
        bad_magic,
        unsupported_version,
        truncated,
        bad_dimensions,
        checksum_mismatch,
        malformed,
    };

    FormatError(Code code, const std::string& what) : Error(what), code_(code) {}

    Code code() const noexcept { return code_; }

private:
    Code code_;
};

inline const char* to_string(FormatError::Code code) {
    switch (code) {
    case FormatError::Code::io: return "io";
    case FormatError::Code::bad_magic: return "bad_magic";
    case FormatError::Code::unsupported_version: return "unsupported_version";
    case FormatError::Code::truncated: return "truncated";
    case FormatError::Code::bad_dimensions: return "bad_dimensions";
    case FormatError::Code::checksum_mismatch: return "checksum_mismatch";
    case FormatError::Code::malformed: return "malformed";
    }
    return "unknown";
}

} // namespace panflow
