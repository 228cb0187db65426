#pragma once

#include <stdexcept>
#include <string>

namespace kfep {

// Base of every error raised by the library. The CLI maps NumericError and
// its subclasses to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public NumericError {
 public:
  using NumericError::NumericError;
};

class TrainingDivergence : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace kfep
