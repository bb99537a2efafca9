#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dproxy {

enum class ErrorCode {
  // ioformats
  BadMagic,
  TruncatedFile,
  TrailingBytes,
  NonFiniteValue,
  ZeroNormRow,
  SchemaError,
  DimensionMismatch,
  LabelOutOfRange,
  EmptyClass,
  IoError,
  // diffmath / fusion
  ShapeMismatch,
  NonFiniteDetected,
  // proxy / candidates
  EmptyCandidateSet,
  BatchTooSmall,
  ZeroNormCentroid,
  // clustering / metrics
  TooFewPoints,
  LengthMismatch,
  InvalidPartition,
  // trainer / synth
  ConfigInvalid,
  NonFiniteLoss,
  PerspectiveUnknown,
  SpecInvalid,
};

std::string_view to_string(ErrorCode code);

/// True for errors caused by bad inputs or configuration (CLI exit code 1);
/// false for failures that happen while a valid job runs (exit code 2).
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace dproxy
