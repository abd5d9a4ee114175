#pragma once

#include <stdexcept>
#include <string>

namespace cguard {

enum class ErrorCode {
  kNonDiagonalizable,
  kComplexEigenvalues,
  kSingularInput,
  kZeroCouplingDiagonal,
  kPivotFailure,
  kSingularTheta,
  kDimensionMismatch,
  kNonFiniteInput,
  kUnderdampedGains,
  kNonPositiveGain,
  kNonFiniteAction,
  kNonFiniteLoss,
  kMissingCheckpoint,
  kInvalidConfig,
};

const char* to_string(ErrorCode code);

// All recoverable failures in the library are reported through this type so
// callers can branch on code() instead of parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  // Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace cguard
