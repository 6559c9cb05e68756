#pragma once

#include <stdexcept>
#include <string>

namespace echocotr {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor rank/dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid configuration values (bad groups, rates out of range, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Bad input data: manifest rows, frame indices, value ranges.
struct DataError : Error {
    using Error::Error;
};

/// Malformed or truncated files (containers, weights, manifests).
struct FormatError : Error {
    using Error::Error;
};

/// NaN/Inf escaped an operation, or a numeric abort (diverged loss).
struct NumericError : Error {
    using Error::Error;
};

/// I/O failures (unwritable paths, missing files).
struct IoError : Error {
    using Error::Error;
};

/// Command-line / config-file usage problems (unknown keys, bad flags).
struct UsageError : Error {
    using Error::Error;
};

}  // namespace echocotr
