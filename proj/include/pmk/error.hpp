#pragma once

#include <stdexcept>
#include <string>

namespace pmk {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the documented domain (bad config values, indices, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared during a forward or backward step.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pmk
