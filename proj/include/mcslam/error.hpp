#pragma once

#include <stdexcept>
#include <string>

namespace mcslam {

enum class ErrorCode {
  kInvalidArgument,
  kOutOfRange,
  kAmbiguousLogarithm,
  kMissingSupport,
  kDegenerateGeometry,
  kNoProgress,
  kDegenerateFusion,
  kInsufficientOverlap,
  kTooFewSurfels,
  kParse,
  kIo,
};

const char* to_string(ErrorCode code);

// Single exception type for the library; callers dispatch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mcslam
