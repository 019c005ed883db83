#include "palimpsest/errors.hpp"

namespace palimpsest {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument:
      return "InvalidArgument";
    case ErrorCode::EmptyTranscript:
      return "EmptyTranscript";
    case ErrorCode::StepOutOfRange:
      return "StepOutOfRange";
    case ErrorCode::TokenOutOfRange:
      return "TokenOutOfRange";
    case ErrorCode::SampleTooLarge:
      return "SampleTooLarge";
    case ErrorCode::UnknownEpoch:
      return "UnknownEpoch";
    case ErrorCode::EmptyEpoch:
      return "EmptyEpoch";
    case ErrorCode::InvalidEpochMap:
      return "InvalidEpochMap";
    case ErrorCode::NonFiniteInput:
      return "NonFiniteInput";
    case ErrorCode::DegenerateRanks:
      return "DegenerateRanks";
    case ErrorCode::SingularDesign:
      return "SingularDesign";
    case ErrorCode::WindowOutOfRange:
      return "WindowOutOfRange";
    case ErrorCode::TooFewExamples:
      return "TooFewExamples";
    case ErrorCode::MissingReference:
      return "MissingReference";
    case ErrorCode::MisalignedRecords:
      return "MisalignedRecords";
    case ErrorCode::TooManyPartitions:
      return "TooManyPartitions";
    case ErrorCode::DegenerateProfile:
      return "DegenerateProfile";
    case ErrorCode::DegenerateNullSpread:
      return "DegenerateNullSpread";
    case ErrorCode::InvalidScenario:
      return "InvalidScenario";
    case ErrorCode::ParseError:
      return "ParseError";
    case ErrorCode::IoError:
      return "IoError";
    case ErrorCode::FormatError:
      return "FormatError";
  }
  return "Unknown";
}

}  // namespace palimpsest
