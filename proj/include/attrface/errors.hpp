#pragma once

#include <stdexcept>
#include <string>

namespace attrface {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is invalid. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("invalid config field '" + field + "': " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Bad magic bytes or unsupported version in a binary container.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Truncated or internally inconsistent binary container.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, degenerate norms, diverged training.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace attrface
