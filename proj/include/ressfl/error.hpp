#pragma once

#include <stdexcept>
#include <string>

namespace ressfl {

/// Incompatible tensor / layer shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced or consumed somewhere in the pipeline.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of a stateful API (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration or parameter value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A client touched data outside its own shard.
class PrivacyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// File format failures; `kind()` distinguishes the cause.
class IoError : public std::runtime_error {
 public:
  enum class Kind {
    kOpen,
    kBadMagic,
    kTruncated,
    kCountMismatch,
    kVersionMismatch,
    kChecksum,
    kWrite,
  };

  IoError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace ressfl
