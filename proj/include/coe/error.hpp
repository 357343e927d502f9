#pragma once

#include <stdexcept>
#include <string>

namespace coe {

/// Raised when a caller hands an operation arguments that violate its
/// preconditions (shape mismatch, infeasible demands, malformed files...).
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when an internal invariant is broken. Never expected in a correct
/// build; tests assert it does not fire.
class InternalError : public std::logic_error {
 public:
  explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

inline void ensure(bool condition, const std::string& message) {
  if (!condition) throw InternalError(message);
}

}  // namespace coe
