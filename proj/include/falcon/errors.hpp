#pragma once

// Error taxonomy. Exceptions carry the failing axis in the message so CLI and
// tests can assert on it. WeightFormatError is split from FormatError because
// the CLI maps them to different exit codes.

#include <stdexcept>
#include <string>

namespace falcon {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or axis mismatch between tensors / declared dims.
struct DimensionError : Error {
    using Error::Error;
};

// A scalar argument is outside its valid range (kernel < 1, bad stride, ...).
struct ParamError : Error {
    using Error::Error;
};

// Malformed or unknown keys in a config file.
struct ConfigError : Error {
    using Error::Error;
};

// Operation requires state that was never initialized (running stats, grads).
struct StateError : Error {
    using Error::Error;
};

// Filesystem-level failure: missing file, short read, unwritable path.
struct IoError : Error {
    using Error::Error;
};

// Byte-level decode failure. offset is the position the decoder gave up at;
// pass a negative offset for structural problems with no byte position.
struct FormatError : Error {
    long long offset;
    FormatError(const std::string& msg, long long at)
        : Error(at >= 0 ? msg + " (byte offset " + std::to_string(at) + ")" : msg), offset(at) {}
};

// Weight-file specific decode failure; exits with its own code in the CLI.
struct WeightFormatError : FormatError {
    using FormatError::FormatError;
};

}  // namespace falcon
