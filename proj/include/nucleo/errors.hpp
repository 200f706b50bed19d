#pragma once

#include <stdexcept>
#include <string>

namespace nucleo {

/// Malformed or inconsistent input data (bad files, shape mismatches, invalid runs).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numeric failure (NaN/Inf in gradients or losses, failed gradient certification).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace nucleo
