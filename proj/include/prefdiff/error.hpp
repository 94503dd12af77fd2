#pragma once

#include <stdexcept>
#include <string>

namespace prefdiff {

/// Base class for every error raised by the library. The message always
/// names the offending field, shape or record.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or semantically invalid input data (datasets, checkpoints, configs).
class DataError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Raised when a training loop produces a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace prefdiff
