#pragma once

#include <stdexcept>
#include <string>

namespace handkin {

/// Malformed input: wrong lengths, broken graph, bad config. CLI exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, degenerate matrices, divergence. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateInputError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace handkin
