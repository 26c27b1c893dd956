#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "atelier/control_maps.hpp"
#include "atelier/error.hpp"
#include "json.hpp"

namespace atelier {

using Timestamp = std::int64_t;  // milliseconds since the Unix epoch

Timestamp now_ms();
/// Random RFC 4122 version-4 identifier.
std::string new_uuid();

enum class GenerationMode { TextToImage, ImageToImage, Inpaint };
enum class ControlKind { Edge, Depth };

std::string_view to_string(GenerationMode mode) noexcept;
std::string_view to_string(ControlKind kind) noexcept;

struct ControlUnit {
  ControlKind kind = ControlKind::Edge;
  double weight = 1.0;
  double guidance_start = 0.0;
  double guidance_end = 1.0;
  std::string image_ref;  // filled during preprocessing

  friend bool operator==(const ControlUnit&, const ControlUnit&) = default;
};

struct StyleRef {
  std::string name;
  std::optional<double> weight;  // registry default when absent

  friend bool operator==(const StyleRef&, const StyleRef&) = default;
};

/// Optional members are filled with documented defaults by validate_params.
struct GenerationParams {
  std::string prompt;
  std::string negative_prompt;
  std::int64_t seed = -1;  // -1: pick one at dispatch
  std::optional<int> steps;
  std::optional<double> cfg_scale;
  std::optional<std::string> sampler;
  int width = 512;
  int height = 512;
  GenerationMode mode = GenerationMode::TextToImage;
  std::optional<double> denoising_strength;
  std::vector<ControlUnit> control_units;
  std::vector<StyleRef> styles;
  std::optional<int> batch_size;
  std::string init_ref;  // capture:<id> or result:<job>/<n>
  std::string mask_ref;  // mask:<job>
  int feather_radius = 0;

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

inline constexpr int kDefaultSteps = 20;
inline constexpr double kDefaultCfgScale = 7.0;
inline constexpr std::string_view kDefaultSampler = "euler_a";
inline constexpr double kDefaultDenoising = 0.75;
inline constexpr int kDefaultBatchSize = 1;

/// Sampler identifiers accepted in params, with the webui display names.
struct SamplerName {
  std::string_view id;
  std::string_view webui;
};
std::span<const SamplerName> known_samplers() noexcept;

struct FieldError {
  std::string field;
  std::string message;

  friend bool operator==(const FieldError&, const FieldError&) = default;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<FieldError> fields);
  const std::vector<FieldError>& fields() const noexcept { return fields_; }

 private:
  std::vector<FieldError> fields_;
};

/// A registered LoRA style.
struct StyleEntry {
  std::string name;  // [A-Za-z0-9_-]+
  std::string display_name;
  double default_weight = 1.0;
  std::string description;

  friend bool operator==(const StyleEntry&, const StyleEntry&) = default;
};

bool is_token_safe(std::string_view name) noexcept;

class StyleRegistry {
 public:
  StyleRegistry() = default;
  /// Throws MalformedRegistry for unsafe names, DuplicateStyle for repeats.
  explicit StyleRegistry(std::vector<StyleEntry> entries);

  const StyleEntry* find(std::string_view name) const noexcept;
  const std::vector<StyleEntry>& entries() const noexcept { return entries_; }

 private:
  std::vector<StyleEntry> entries_;
};

/// Collects every violation before throwing ValidationError; on success
/// returns params with all optional members filled.
GenerationParams validate_params(const GenerationParams& params, const StyleRegistry& registry);

/// Appends " <lora:NAME:WEIGHT>" per style. Throws UnknownStyle.
std::string format_prompt_with_styles(std::string_view prompt, const std::vector<StyleRef>& styles,
                                      const StyleRegistry& registry);

/// Shortest fixed-notation decimal that round-trips: 1.0 -> "1", 0.8 -> "0.8".
std::string format_weight(double weight);

enum class JobState { Queued, Preprocessing, Dispatched, Sampling, Completed, Failed, Canceled };

std::string_view to_string(JobState state) noexcept;
std::optional<JobState> job_state_from_string(std::string_view name) noexcept;
constexpr bool is_terminal(JobState s) noexcept {
  return s == JobState::Completed || s == JobState::Failed || s == JobState::Canceled;
}

struct RenderJob {
  std::string id;
  std::string capture_id;
  GenerationParams params;
  JobState state = JobState::Queued;
  double progress = 0.0;
  std::vector<std::string> result_refs;
  std::optional<std::string> error;
  Timestamp created_ms = 0;
  Timestamp updated_ms = 0;
  std::optional<std::string> parent_job;

  friend bool operator==(const RenderJob&, const RenderJob&) = default;
};

/// Highest progress a job reports before it completes; 1.0 is reserved for
/// Completed.
inline constexpr double kMaxSamplingProgress = 0.99;

namespace event {
struct StartPreprocess {};
struct Dispatch {
  std::int64_t resolved_seed = 0;  // replaces a -1 seed
};
struct SamplingStarted {};
struct Progress {
  double fraction = 0.0;
};
struct Complete {
  std::vector<std::string> result_refs;
};
struct Fail {
  std::string message;
};
struct Cancel {};
}  // namespace event

using JobEvent = std::variant<event::StartPreprocess, event::Dispatch, event::SamplingStarted,
                              event::Progress, event::Complete, event::Fail, event::Cancel>;

std::string_view event_name(const JobEvent& ev) noexcept;

/// Pure state-machine step. Throws InvalidTransition.
RenderJob transition(const RenderJob& job, const JobEvent& ev, Timestamp now = now_ms());

RenderJob make_job(std::string capture_id, GenerationParams params, Timestamp now = now_ms());

struct InpaintOverrides {
  std::optional<std::int64_t> seed;
  std::optional<int> steps;
  std::optional<double> cfg_scale;
  std::optional<std::string> sampler;
  std::optional<double> denoising_strength;
  std::optional<std::string> negative_prompt;
  std::optional<std::vector<StyleRef>> styles;
  std::optional<int> batch_size;
};

/// New Queued Inpaint job over one result of a completed parent. The mask is
/// stored by the caller under params.mask_ref. Throws ParentNotCompleted,
/// DimensionMismatch or InvalidArgument (result index).
RenderJob derive_inpaint_job(const RenderJob& parent, std::size_t result_index,
                             const MaskSpec& mask, std::string_view new_prompt,
                             const InpaintOverrides& overrides, Timestamp now = now_ms());

std::string capture_ref(std::string_view capture_id);
std::string result_ref(std::string_view job_id, std::size_t index);
std::string mask_ref(std::string_view job_id);

/// Parsed form of an image reference string.
struct ImageRef {
  enum class Kind { Capture, Result, Mask } kind;
  std::string id;
  std::size_t index = 0;
};
std::optional<ImageRef> parse_image_ref(std::string_view ref);

// JSON mapping. from_json variants collect type errors and throw
// ValidationError so API callers get field-level messages.
nlohmann::json to_json(const GenerationParams& p);
GenerationParams params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RenderJob& job);
RenderJob job_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StyleEntry& s);
InpaintOverrides overrides_from_json(const nlohmann::json& j);

}  // namespace atelier
