#pragma once

#include <stdexcept>
#include <string>

namespace physnet {

// Argument, shape or precondition violation. The CLI maps these to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Constant or otherwise unusable signal (zero variance, no peaks, empty spectrum).
class DegenerateSignalError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// File system or format failure. The CLI maps these to exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace physnet
