#pragma once

#include <stdexcept>
#include <string>

namespace qpm {

/// Invalid shapes, sizes or option values. The CLI maps this to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// A P x A batch cannot be formed from the available data.
class SamplingError : public std::runtime_error {
 public:
  explicit SamplingError(const std::string& what) : std::runtime_error(what) {}
};

/// Eval-mode quality prediction requested before any running statistics exist.
class UncalibratedPredictorError : public std::logic_error {
 public:
  explicit UncalibratedPredictorError(const std::string& what) : std::logic_error(what) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed checkpoint or feature dump, or one incompatible with the active config.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace qpm
