#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace genspec {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration: unknown kinds, bad shapes, invalid hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise unusable input values.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: non-finite intermediate, indefinite matrix, failed self-check.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Simulation left the domain or produced a non-finite state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

/// Deposit attempted on a metadynamics bias after its freeze step.
class FrozenBiasError : public Error {
 public:
  using Error::Error;
};

/// Dataset construction produced nothing usable.
class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

/// Degenerate geometry in rigid-body alignment.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Raised when an index is outside the populated range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// I/O and parsing failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace genspec
