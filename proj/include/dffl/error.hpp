#pragma once

#include <stdexcept>
#include <string>

namespace dffl {

// Failure classes map onto distinct CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class FramingError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

class OversizeError : public FramingError {
 public:
  using FramingError::FramingError;
};

class SchemaError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dffl
