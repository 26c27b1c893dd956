#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace atelier {

enum class ErrorCode {
  InvalidArgument,
  MalformedPng,
  UnsupportedPng,
  UnsupportedChannels,
  ImageTooSmall,
  DimensionMismatch,
  NoGeometry,
  MissingDepth,
  MissingDepthMeta,
  InvalidDepth,
  ValidationFailed,
  UnknownStyle,
  InvalidTransition,
  ParentNotCompleted,
  BackendUnavailable,
  BackendRejected,
  Timeout,
  Canceled,
  MalformedResponse,
  RevisionConflict,
  NotFound,
  IoError,
  MalformedRegistry,
  DuplicateStyle,
  Unreachable,  // client side: the service did not answer
};

/// Stable snake_case name used in API error envelopes and logs.
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace atelier
