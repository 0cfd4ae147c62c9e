#pragma once

#include <stdexcept>
#include <string>

namespace ncgnn {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed structure: broken CSR invariants, asymmetric adjacency, etc.
struct StructuralError : Error {
    using Error::Error;
};

// Value-level violations: negative weights, labels out of range, bad config.
struct ValidationError : Error {
    using Error::Error;
};

// Shape or size mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// File parsing / filesystem failures. Carries an optional line number.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg), line(0) {}
    IoError(const std::string& msg, std::size_t line_no)
        : Error(msg + " (line " + std::to_string(line_no) + ")"), line(line_no) {}
    std::size_t line;
};

// NaN/Inf encountered where finite values are required (divergence, bad grads).
struct NumericError : Error {
    using Error::Error;
};

// Backward pass attempted after the bound parameters were mutated.
struct StaleTapeError : Error {
    using Error::Error;
};

}  // namespace ncgnn
