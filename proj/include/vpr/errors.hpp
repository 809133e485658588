#pragma once

#include <stdexcept>
#include <string>

namespace vpr {

/// Tensor or matrix dimensions do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input is well-shaped but numerically unusable (zero vector, empty set, ...).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A file or stream does not follow the expected on-disk layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument values that are not shape related (ranges, options).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace vpr
