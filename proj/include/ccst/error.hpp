#pragma once

#include <stdexcept>
#include <string>

namespace ccst {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed vector/index/checkpoint file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (open, read, write), message names the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes or dimensions do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A configuration or argument violates its documented range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ccst
