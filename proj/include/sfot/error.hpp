#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sfot {

enum class ErrorCode {
  kInvalidArgument,
  kZeroNormVector,
  kLabelOutOfRange,
  kNonFiniteCost,
  kDegenerateMarginal,
  kShapeMismatch,
  kInstanceTooLarge,
  kEmptyInput,
  kAllEmpty,
  kDimensionMismatch,
  kStaleCache,
  kEmptyInitClass,
  kInsufficientData,
  kMissingNovelClasses,
  kUnknownClassInTestSet,
  kNotEnoughSamples,
  kFormatError,
  kIoError,
  kNumericFailure,
};

std::string_view to_string(ErrorCode code);

// Broad grouping used by the CLI to pick an exit status.
enum class ErrorCategory { kUsage, kData, kNumeric };
ErrorCategory category_of(ErrorCode code);

/// Exception carrying a machine-readable code and, where meaningful, the
/// offending index (sample index, class id, byte offset).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::uint64_t> index = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::uint64_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::uint64_t> index_;
};

}  // namespace sfot
