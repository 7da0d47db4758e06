#pragma once

#include <stdexcept>
#include <string>

namespace pace {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer shape disagreement.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// NaN/Inf produced where a finite value is required, or training diverged.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// backward() called without a matching forward() record.
struct TapeError : Error {
  explicit TapeError(const std::string& msg) : Error(msg) {}
};

/// Malformed checkpoint or dataset file.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Invalid or missing configuration key.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// A pipeline stage prerequisite is absent on disk.
struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

}  // namespace pace
