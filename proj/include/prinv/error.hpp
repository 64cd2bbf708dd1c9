#pragma once

#include <stdexcept>
#include <string>

namespace prinv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or array shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

class EmptyReductionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected in a checked computation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace prinv
