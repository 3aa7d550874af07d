#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geomark {

enum class ErrorCode {
  ZeroVector,
  DimMismatch,
  EmptyInput,
  RhoOutOfRange,
  TooFewPoints,
  DegenerateData,
  EmptySet,
  TooFewEmbeddings,
  DegenerateRadius,
  InsufficientSamples,
  EmptyGroup,
  QueryFailure,
  IdMismatch,
  KeepOutOfRange,
  BadDims,
  Diverged,
  CorruptFile,
  IoError,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::RhoOutOfRange: return "RhoOutOfRange";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::TooFewEmbeddings: return "TooFewEmbeddings";
    case ErrorCode::DegenerateRadius: return "DegenerateRadius";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::QueryFailure: return "QueryFailure";
    case ErrorCode::IdMismatch: return "IdMismatch";
    case ErrorCode::KeepOutOfRange: return "KeepOutOfRange";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace geomark
