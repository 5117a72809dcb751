#pragma once

#include <stdexcept>
#include <string>

namespace gidd {

// Bad arguments: out-of-range log-SNR, invalid token, wrong sizes.
class RangeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input records (runs files, datasets, checkpoints).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg, long line = -1)
        : std::runtime_error(line >= 0 ? "line " + std::to_string(line) + ": " + msg : msg),
          line_(line) {}

    long line() const noexcept { return line_; }

private:
    long line_;
};

// Numerical failure: divergence, non-convergence, impossible states.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace gidd
