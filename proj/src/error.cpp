#include "sfot/error.hpp"

namespace sfot {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kZeroNormVector: return "ZeroNormVector";
    case ErrorCode::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::kNonFiniteCost: return "NonFiniteCost";
    case ErrorCode::kDegenerateMarginal: return "DegenerateMarginal";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kInstanceTooLarge: return "InstanceTooLarge";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kAllEmpty: return "AllEmpty";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kStaleCache: return "StaleCache";
    case ErrorCode::kEmptyInitClass: return "EmptyInitClass";
    case ErrorCode::kInsufficientData: return "InsufficientData";
    case ErrorCode::kMissingNovelClasses: return "MissingNovelClasses";
    case ErrorCode::kUnknownClassInTestSet: return "UnknownClassInTestSet";
    case ErrorCode::kNotEnoughSamples: return "NotEnoughSamples";
    case ErrorCode::kFormatError: return "FormatError";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kNumericFailure: return "NumericFailure";
  }
  return "Unknown";
}

ErrorCategory category_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
      return ErrorCategory::kUsage;
    case ErrorCode::kZeroNormVector:
    case ErrorCode::kNonFiniteCost:
    case ErrorCode::kDegenerateMarginal:
    case ErrorCode::kNumericFailure:
      return ErrorCategory::kNumeric;
    default:
      return ErrorCategory::kData;
  }
}

Error::Error(ErrorCode code, const std::string& message,
             std::optional<std::uint64_t> index)
    : std::runtime_error(message), code_(code), index_(index) {}

}  // namespace sfot
