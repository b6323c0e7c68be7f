#pragma once

#include <stdexcept>
#include <string>

namespace expx {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not fit the operation. The message names the dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A primitive produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File contents are malformed, truncated or of an unsupported kind.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace expx
