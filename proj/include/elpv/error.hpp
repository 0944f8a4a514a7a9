#pragma once

#include <stdexcept>
#include <string>

namespace elpv {

/// Raised for invalid input, violated preconditions and malformed files.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an operation has no meaningful result for the given data
/// (constant image, singular fit, empty search space).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

}  // namespace elpv
