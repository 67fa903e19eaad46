#pragma once

#include <stdexcept>
#include <string>

namespace labelseg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or codec failure (missing file, unwritable path, truncated data).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed content: bad header, bad manifest, corrupted checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Array dimensions or grid geometry disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during numerical work.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace labelseg
