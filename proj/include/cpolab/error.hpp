#pragma once

#include <stdexcept>
#include <string>

namespace cpolab {

/// Bad input: malformed files, invalid configs, violated preconditions.
/// The CLI maps these to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// A sequence does not fit the model's context window.
class LengthError : public ValidationError {
 public:
  explicit LengthError(const std::string& what) : ValidationError(what) {}
};

/// Failure while computing something from valid inputs (I/O, numerical
/// breakdown, enumeration mass deficit). The CLI maps these to exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace cpolab
