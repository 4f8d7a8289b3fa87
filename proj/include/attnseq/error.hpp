#pragma once

#include <stdexcept>
#include <string>

namespace attnseq {

// Base for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid model / training / generator configuration.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Problems with dataset files or dataset contents.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Numerically degenerate inputs (all-masked softmax row, undefined metric, ...).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Training aborted because the loss or a gradient became non-finite.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

}  // namespace attnseq
