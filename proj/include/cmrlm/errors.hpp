#pragma once

#include <stdexcept>
#include <string>

namespace cmrlm {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid shapes, architecture, hyperparameters or other static configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An object was used in a state that does not support the call.
class StateError : public Error {
 public:
  using Error::Error;
};

/// The caller violated an operation's precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint decoding failure; `kind()` tells the failure classes apart.
class LoadError : public Error {
 public:
  enum class Kind { Io, BadMagic, Version, Truncated, Corrupt, Consistency };

  LoadError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace cmrlm
