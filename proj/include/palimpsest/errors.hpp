#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace palimpsest {

enum class ErrorCode {
  InvalidArgument,
  EmptyTranscript,
  StepOutOfRange,
  TokenOutOfRange,
  SampleTooLarge,
  UnknownEpoch,
  EmptyEpoch,
  InvalidEpochMap,
  NonFiniteInput,
  DegenerateRanks,
  SingularDesign,
  WindowOutOfRange,
  TooFewExamples,
  MissingReference,
  MisalignedRecords,
  TooManyPartitions,
  DegenerateProfile,
  DegenerateNullSpread,
  InvalidScenario,
  ParseError,
  IoError,
  FormatError,
};

std::string_view to_string(ErrorCode code) noexcept;

// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace palimpsest
