#pragma once

#include <stdexcept>
#include <string>

namespace oscar {

// Error taxonomy shared across the library. Callers catch the base type or a
// specific subtype; messages carry the offending shapes/lengths.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SequenceLengthError : std::runtime_error {
  explicit SequenceLengthError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace oscar
