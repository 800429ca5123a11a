#pragma once

#include <stdexcept>
#include <string>

namespace ghostb {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad values in a config or request (out-of-range index, rule bound violation).
struct InvalidConfigError : Error {
    using Error::Error;
};

// Structurally valid request over unusable data (empty dataset, empty shard).
struct InvalidInputError : Error {
    using Error::Error;
};

// Mismatched matrix / parameter shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed dataset or config file.
struct ParseError : Error {
    using Error::Error;
};

// Trigger band cannot reach the requested hit probability.
struct CalibrationError : Error {
    using Error::Error;
};

}  // namespace ghostb
