#pragma once

#include <stdexcept>
#include <string>

namespace rlgm {

// Thrown when inputs violate a documented precondition (bad dimensions,
// out-of-domain parameters, malformed files).  CLI maps this to exit code 2.
struct validation_error : std::invalid_argument {
  explicit validation_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Thrown when a computation fails numerically (factorization breakdown,
// divergence, non-finite values).  CLI maps this to exit code 3.
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw validation_error(msg);
}

}  // namespace rlgm
