#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fraudseq {

/// Error classes surfaced by the library. The CLI maps each class to its own
/// exit code, so keep the numbering stable.
enum class ErrorCode {
  kSchemaMismatch,
  kMissingEntityId,
  kMissingTimestamp,
  kDegenerateDistribution,
  kTooFewValues,
  kUnsortedSequence,
  kIndexOutOfRange,
  kShapeMismatch,
  kCorruptModelFile,
  kEmptyScorableSet,
  kNoFraudCards,
  kNonFiniteGradient,
  kCorruptRecord,
  kUnreadableLog,
  kClosed,
  kDiskFull,
  kQueueSaturated,
  kRateUnsustainable,
  kInvalidConfig,
  kUnachievablePrecision,
  kNoNegatives,
  kNoFraud,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace fraudseq
