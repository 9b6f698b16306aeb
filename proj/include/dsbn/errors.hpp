#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsbn {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor / channel extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A train-mode normalization batch that is too small to estimate variance.
class BatchSizeError : public Error {
 public:
  using Error::Error;
};

// A class index outside [0, C).
class LabelRangeError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API contract (e.g. backward on a non-scalar tensor).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Forward through a domain that has no normalization branch.
class DomainLookupError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment / layer / dataset configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Class weight requested for a class with zero prior mass.
class DegeneratePriorError : public Error {
 public:
  using Error::Error;
};

// Target labels requested outside of evaluation.
class LabelQuarantineError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file contents (checkpoint, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, std::int64_t iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::int64_t iteration() const noexcept { return iteration_; }

 private:
  std::int64_t iteration_;
};

}  // namespace dsbn
