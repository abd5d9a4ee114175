#include "cguard/errors.h"

namespace cguard {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonDiagonalizable: return "NonDiagonalizable";
    case ErrorCode::kComplexEigenvalues: return "ComplexEigenvalues";
    case ErrorCode::kSingularInput: return "SingularInput";
    case ErrorCode::kZeroCouplingDiagonal: return "ZeroCouplingDiagonal";
    case ErrorCode::kPivotFailure: return "PivotFailure";
    case ErrorCode::kSingularTheta: return "SingularTheta";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNonFiniteInput: return "NonFiniteInput";
    case ErrorCode::kUnderdampedGains: return "UnderdampedGains";
    case ErrorCode::kNonPositiveGain: return "NonPositiveGain";
    case ErrorCode::kNonFiniteAction: return "NonFiniteAction";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kMissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace cguard
