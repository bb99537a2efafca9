#include "dproxy/error.hpp"

namespace dproxy {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::TrailingBytes: return "TrailingBytes";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ZeroNormRow: return "ZeroNormRow";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteDetected: return "NonFiniteDetected";
    case ErrorCode::EmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::ZeroNormCentroid: return "ZeroNormCentroid";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InvalidPartition: return "InvalidPartition";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::PerspectiveUnknown: return "PerspectiveUnknown";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
  }
  return "Unknown";
}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteDetected:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::IoError:
      return false;
    default:
      return true;
  }
}

}  // namespace dproxy
