#pragma once

#include <stdexcept>
#include <string>

namespace uvflow {

/// Base for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied something outside a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file did not match the expected on-disk layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace uvflow
