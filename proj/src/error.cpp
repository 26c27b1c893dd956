#include "atelier/error.hpp"

namespace atelier {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::MalformedPng: return "malformed_png";
    case ErrorCode::UnsupportedPng: return "unsupported_png";
    case ErrorCode::UnsupportedChannels: return "unsupported_channels";
    case ErrorCode::ImageTooSmall: return "image_too_small";
    case ErrorCode::DimensionMismatch: return "dimension_mismatch";
    case ErrorCode::NoGeometry: return "no_geometry";
    case ErrorCode::MissingDepth: return "missing_depth";
    case ErrorCode::MissingDepthMeta: return "missing_depth_meta";
    case ErrorCode::InvalidDepth: return "invalid_depth";
    case ErrorCode::ValidationFailed: return "validation_failed";
    case ErrorCode::UnknownStyle: return "unknown_style";
    case ErrorCode::InvalidTransition: return "invalid_transition";
    case ErrorCode::ParentNotCompleted: return "parent_not_completed";
    case ErrorCode::BackendUnavailable: return "backend_unavailable";
    case ErrorCode::BackendRejected: return "backend_rejected";
    case ErrorCode::Timeout: return "timeout";
    case ErrorCode::Canceled: return "canceled";
    case ErrorCode::MalformedResponse: return "malformed_response";
    case ErrorCode::RevisionConflict: return "revision_conflict";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::IoError: return "io_error";
    case ErrorCode::MalformedRegistry: return "malformed_registry";
    case ErrorCode::DuplicateStyle: return "duplicate_style";
    case ErrorCode::Unreachable: return "unreachable";
  }
  return "unknown";
}

}  // namespace atelier
