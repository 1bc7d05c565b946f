#pragma once

#include <stdexcept>
#include <string>

namespace slil {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between tensors.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced or consumed, or domain violation (log of x <= 0).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration file, unknown key, or invalid CLI usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable on-disk artifact (feature file, checkpoint).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A CTC target that no length-T alignment can produce.
class InfeasibleTargetError : public Error {
 public:
  using Error::Error;
};

}  // namespace slil
