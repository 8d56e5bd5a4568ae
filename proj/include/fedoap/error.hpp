#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedoap {

enum class ErrorCode {
  ShapeMismatch,
  NonFiniteValue,
  NonScalarRoot,
  DetachedRoot,
  NegativeVariance,
  MissingGradient,
  StepOutOfRange,
  InvalidConfig,
  DimMismatch,
  EmptyKV,
  NonBinaryTarget,
  NonBinaryInput,
  RoundMismatch,
  PartitionViolation,
  NameSetMismatch,
  EmptyMessageSet,
  EmptyValidationSplit,
  EmptySplit,
  InvalidProfile,
  SplitTooSmall,
  BadMagic,
  TruncatedFile,
  VersionUnsupported,
  FormulaMeasurementMismatch,
  InvalidArgument,
  IoError,
};

constexpr std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonScalarRoot: return "NonScalarRoot";
    case ErrorCode::DetachedRoot: return "DetachedRoot";
    case ErrorCode::NegativeVariance: return "NegativeVariance";
    case ErrorCode::MissingGradient: return "MissingGradient";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyKV: return "EmptyKV";
    case ErrorCode::NonBinaryTarget: return "NonBinaryTarget";
    case ErrorCode::NonBinaryInput: return "NonBinaryInput";
    case ErrorCode::RoundMismatch: return "RoundMismatch";
    case ErrorCode::PartitionViolation: return "PartitionViolation";
    case ErrorCode::NameSetMismatch: return "NameSetMismatch";
    case ErrorCode::EmptyMessageSet: return "EmptyMessageSet";
    case ErrorCode::EmptyValidationSplit: return "EmptyValidationSplit";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::InvalidProfile: return "InvalidProfile";
    case ErrorCode::SplitTooSmall: return "SplitTooSmall";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::FormulaMeasurementMismatch: return "FormulaMeasurementMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// Every failure the library reports carries one of the codes above so callers
// (and the CLI) can branch on the kind without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace fedoap
