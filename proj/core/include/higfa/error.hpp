#pragma once

#include <stdexcept>
#include <string>

namespace higfa {

/// Base exception for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or image extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value left its mathematical domain (division by zero, log of a
/// non-positive number, a NaN or Inf result).
class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace higfa
