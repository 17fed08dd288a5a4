#include "mcslam/error.hpp"

namespace mcslam {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kOutOfRange: return "out-of-range";
    case ErrorCode::kAmbiguousLogarithm: return "ambiguous-logarithm";
    case ErrorCode::kMissingSupport: return "missing-support";
    case ErrorCode::kDegenerateGeometry: return "degenerate-geometry";
    case ErrorCode::kNoProgress: return "no-progress";
    case ErrorCode::kDegenerateFusion: return "degenerate-fusion";
    case ErrorCode::kInsufficientOverlap: return "insufficient-overlap";
    case ErrorCode::kTooFewSurfels: return "too-few-surfels";
    case ErrorCode::kParse: return "parse-error";
    case ErrorCode::kIo: return "io-error";
  }
  return "unknown";
}

}  // namespace mcslam
