#pragma once

#include <stdexcept>
#include <string>

namespace msfet {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input record. The message names the line or byte offset.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Event timestamps went backwards beyond the allowed tolerance.
class OrderingError : public Error {
 public:
  using Error::Error;
};

/// Coordinate outside the sensor.
class BoundsError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace msfet
