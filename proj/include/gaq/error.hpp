#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gaq {

enum class ErrorCode {
  InvalidSize,
  NotUnit,
  ZeroVector,
  CodeOutOfRange,
  NonScalarLoss,
  ShapeMismatch,
  EmptyCalibrationSet,
  DivergedLoss,
  NonFiniteForce,
  InsufficientSize,
  SelfCheckFailed,
  CheckpointLoadError,
  FormatError,
  UsageError,
};

std::string_view error_code_name(ErrorCode code);

/// Every failure raised by the toolkit carries one of the categories above so
/// the CLI can report a single-line diagnostic and choose the exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gaq
