#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace civsf {

// Base of every error raised by the library. The CLI maps the concrete kind
// onto its exit code, see harness/cli.hpp.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or hyperparameters (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor extents that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Value outside of its admissible domain (negative delta, DOY > 365, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Index outside of a series span.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Violated API contract, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered during evaluation or training (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed binary container or checkpoint (exit code 3).
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Missing input data or files (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// A training stage was asked to run without the stages it builds on.
class DependencyError : public Error {
 public:
  using Error::Error;
};

// Checkpoint/head pairing that the framework compatibility matrix forbids.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// Failure writing an output artifact such as a PPM (exit code 4).
class OutputError : public Error {
 public:
  using Error::Error;
};

}  // namespace civsf
