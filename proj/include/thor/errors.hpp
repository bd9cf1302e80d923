// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace thor {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Numeric input violates a precondition (e.g. a row that is not a distribution).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is invalid. `field()` holds the dotted path of the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// A routing operation was requested that the layer's mode cannot perform.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// I/O failure or a malformed persisted file.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace thor
