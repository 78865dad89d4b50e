#pragma once

#include <stdexcept>
#include <string>

namespace ctsynth {

// Base of every error raised by the library; the CLI maps it to a nonzero exit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or grid dimensions violate an operation's shape contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Intensity-domain mismatch (HU vs UNIT).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A caller or adapter broke an interface contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed input record or file.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training diverged (NaN/Inf loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctsynth
