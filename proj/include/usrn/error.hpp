#pragma once

#include <stdexcept>
#include <string>

namespace usrn {

/// Invalid configuration: bad flags, dimension mismatches, unknown keys.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent data: out-of-range labels, bad files.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values encountered during training.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace usrn
