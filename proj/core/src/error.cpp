#include "exfm/error.hpp"

namespace exfm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
      return "InvalidArgument";
    case ErrorCode::kDimensionMismatch:
      return "DimensionMismatch";
    case ErrorCode::kSingularMatrix:
      return "SingularMatrix";
    case ErrorCode::kMissingSupervision:
      return "MissingSupervision";
    case ErrorCode::kDegenerateWindow:
      return "DegenerateWindow";
    case ErrorCode::kNoSnapshotInstalled:
      return "NoSnapshotInstalled";
    case ErrorCode::kLateFeedback:
      return "LateFeedback";
    case ErrorCode::kCasLost:
      return "CasLost";
    case ErrorCode::kNotConverged:
      return "NotConverged";
    case ErrorCode::kInsufficientGrid:
      return "InsufficientGrid";
    case ErrorCode::kConfigError:
      return "ConfigError";
    case ErrorCode::kFormatError:
      return "FormatError";
    case ErrorCode::kIoError:
      return "IoError";
  }
  return "Unknown";
}

}  // namespace exfm
