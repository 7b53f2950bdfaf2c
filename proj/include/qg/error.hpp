#pragma once

#include <stdexcept>
#include <string>

namespace qg {

// Base for every error raised by the toolkit. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape incompatibility or malformed numeric input.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad user input: schema violations, malformed files, violated preconditions.
class InputError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures (missing file, failed write, failed rename).
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or other numerical breakdown.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace qg
