#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <random>

#include "atelier/job_model.hpp"

namespace atelier {

using nlohmann::json;

Timestamp now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string new_uuid() {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  std::array<std::uint8_t, 16> b{};
  for (std::size_t i = 0; i < b.size(); i += 8) {
    const std::uint64_t r = rng();
    for (std::size_t k = 0; k < 8; ++k) b[i + k] = static_cast<std::uint8_t>(r >> (8 * k));
  }
  b[6] = static_cast<std::uint8_t>((b[6] & 0x0F) | 0x40);
  b[8] = static_cast<std::uint8_t>((b[8] & 0x3F) | 0x80);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) out.push_back('-');
    out.push_back(kHex[b[i] >> 4]);
    out.push_back(kHex[b[i] & 0x0F]);
  }
  return out;
}

std::string_view to_string(GenerationMode mode) noexcept {
  switch (mode) {
    case GenerationMode::TextToImage: return "txt2img";
    case GenerationMode::ImageToImage: return "img2img";
    case GenerationMode::Inpaint: return "inpaint";
  }
  return "txt2img";
}

std::string_view to_string(ControlKind kind) noexcept {
  return kind == ControlKind::Edge ? "edge" : "depth";
}

std::string_view to_string(JobState state) noexcept {
  switch (state) {
    case JobState::Queued: return "queued";
    case JobState::Preprocessing: return "preprocessing";
    case JobState::Dispatched: return "dispatched";
    case JobState::Sampling: return "sampling";
    case JobState::Completed: return "completed";
    case JobState::Failed: return "failed";
    case JobState::Canceled: return "canceled";
  }
  return "queued";
}

std::optional<JobState> job_state_from_string(std::string_view name) noexcept {
  for (auto s : {JobState::Queued, JobState::Preprocessing, JobState::Dispatched,
                 JobState::Sampling, JobState::Completed, JobState::Failed, JobState::Canceled}) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

namespace {

constexpr std::array<SamplerName, 10> kSamplers = {{
    {"euler_a", "Euler a"},
    {"euler", "Euler"},
    {"lms", "LMS"},
    {"heun", "Heun"},
    {"dpm2", "DPM2"},
    {"dpm2_a", "DPM2 a"},
    {"dpmpp_2m", "DPM++ 2M"},
    {"dpmpp_sde", "DPM++ SDE"},
    {"ddim", "DDIM"},
    {"unipc", "UniPC"},
}};

bool in_range(double v, double lo, double hi) { return v >= lo && v <= hi; }

std::string describe(const std::vector<FieldError>& fields) {
  std::string msg = "validation failed:";
  for (const auto& f : fields) msg += " " + f.field + ": " + f.message + ";";
  return msg;
}

}  // namespace

std::span<const SamplerName> known_samplers() noexcept { return kSamplers; }

ValidationError::ValidationError(std::vector<FieldError> fields)
    : Error(ErrorCode::ValidationFailed, describe(fields)), fields_(std::move(fields)) {}

bool is_token_safe(std::string_view name) noexcept {
  return !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
           c == '_' || c == '-';
  });
}

StyleRegistry::StyleRegistry(std::vector<StyleEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!is_token_safe(entries_[i].name)) {
      throw Error(ErrorCode::MalformedRegistry,
                  "style name '" + entries_[i].name + "' must match [A-Za-z0-9_-]+");
    }
    for (std::size_t k = 0; k < i; ++k) {
      if (entries_[k].name == entries_[i].name) {
        throw Error(ErrorCode::DuplicateStyle, "style '" + entries_[i].name + "' registered twice");
      }
    }
  }
}

const StyleEntry* StyleRegistry::find(std::string_view name) const noexcept {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

GenerationParams validate_params(const GenerationParams& params, const StyleRegistry& registry) {
  GenerationParams p = params;
  std::vector<FieldError> errs;
  auto fail = [&](std::string field, std::string message) {
    errs.push_back({std::move(field), std::move(message)});
  };

  if (!p.steps) p.steps = kDefaultSteps;
  if (!p.cfg_scale) p.cfg_scale = kDefaultCfgScale;
  if (!p.sampler) p.sampler = std::string(kDefaultSampler);
  if (!p.denoising_strength) p.denoising_strength = kDefaultDenoising;
  if (!p.batch_size) p.batch_size = kDefaultBatchSize;

  if (p.seed < -1) fail("seed", "seed must be -1 or non-negative");
  if (*p.steps < 1 || *p.steps > 150) fail("steps", "steps out of range");
  if (!in_range(*p.cfg_scale, 1.0, 30.0)) fail("cfg_scale", "cfg_scale out of range");
  if (std::none_of(kSamplers.begin(), kSamplers.end(),
                   [&](const SamplerName& s) { return s.id == *p.sampler; })) {
    fail("sampler", "unknown sampler '" + *p.sampler + "'");
  }
  for (auto [name, value] : {std::pair{"width", p.width}, std::pair{"height", p.height}}) {
    if (value < 64 || value > 2048) fail(name, std::string(name) + " out of range");
    if (value % 8 != 0) fail(name, std::string(name) + " must be multiple of 8");
  }
  if (*p.batch_size < 1 || *p.batch_size > 8) fail("batch_size", "batch_size out of range");
  if (!in_range(*p.denoising_strength, 0.0, 1.0)) {
    fail("denoising_strength", "denoising_strength out of range");
  }
  if (p.feather_radius < 0 || p.feather_radius > 30) {
    fail("feather_radius", "feather_radius out of range");
  }

  bool seen_edge = false;
  bool seen_depth = false;
  for (std::size_t i = 0; i < p.control_units.size(); ++i) {
    const auto& u = p.control_units[i];
    const std::string at = "control_units[" + std::to_string(i) + "]";
    if (!in_range(u.weight, 0.0, 2.0)) fail(at + ".weight", "weight out of range");
    if (!in_range(u.guidance_start, 0.0, 1.0)) fail(at + ".guidance_start", "guidance_start out of range");
    if (!in_range(u.guidance_end, 0.0, 1.0)) fail(at + ".guidance_end", "guidance_end out of range");
    if (u.guidance_start > u.guidance_end) {
      fail(at + ".guidance_start", "guidance_start must not exceed guidance_end");
    }
    bool& seen = u.kind == ControlKind::Edge ? seen_edge : seen_depth;
    if (seen) fail(at + ".kind", "at most one unit per kind");
    seen = true;
  }

  for (std::size_t i = 0; i < p.styles.size(); ++i) {
    auto& s = p.styles[i];
    const std::string at = "styles[" + std::to_string(i) + "]";
    const StyleEntry* entry = registry.find(s.name);
    if (!entry) {
      fail(at + ".name", "unknown style '" + s.name + "'");
      continue;
    }
    if (!s.weight) s.weight = entry->default_weight;
    if (!in_range(*s.weight, 0.0, 2.0)) fail(at + ".weight", "weight out of range");
  }

  if (p.mode != GenerationMode::TextToImage) {
    const auto ref = parse_image_ref(p.init_ref);
    if (p.init_ref.empty()) {
      fail("init_ref", "init_ref required for img2img and inpaint");
    } else if (!ref || ref->kind == ImageRef::Kind::Mask) {
      fail("init_ref", "init_ref must reference a capture or a result");
    }
  }
  if (p.mode == GenerationMode::Inpaint) {
    const auto ref = parse_image_ref(p.mask_ref);
    if (p.mask_ref.empty()) {
      fail("mask_ref", "mask_ref required for inpaint");
    } else if (!ref || ref->kind != ImageRef::Kind::Mask) {
      fail("mask_ref", "mask_ref must reference a stored mask");
    }
  }

  if (!errs.empty()) throw ValidationError(std::move(errs));
  return p;
}

std::string format_weight(double weight) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), weight, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

std::string format_prompt_with_styles(std::string_view prompt, const std::vector<StyleRef>& styles,
                                      const StyleRegistry& registry) {
  std::string out(prompt);
  for (const auto& s : styles) {
    const StyleEntry* entry = registry.find(s.name);
    if (!entry) throw Error(ErrorCode::UnknownStyle, "unknown style '" + s.name + "'");
    out += " <lora:" + s.name + ":" + format_weight(s.weight.value_or(entry->default_weight)) + ">";
  }
  return out;
}

std::string_view event_name(const JobEvent& ev) noexcept {
  static constexpr std::array<std::string_view, 7> kNames = {
      "StartPreprocess", "Dispatch", "SamplingStarted", "Progress", "Complete", "Fail", "Cancel"};
  return kNames[ev.index()];
}

RenderJob transition(const RenderJob& job, const JobEvent& ev, Timestamp now) {
  auto invalid = [&]() -> Error {
    return Error(ErrorCode::InvalidTransition, "cannot apply " + std::string(event_name(ev)) +
                                                   " to a job in state " +
                                                   std::string(to_string(job.state)));
  };
  if (is_terminal(job.state)) throw invalid();

  auto require = [&](JobState expected) {
    if (job.state != expected) throw invalid();
  };

  RenderJob next = job;
  std::visit(
      [&](const auto& e) {
        using E = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<E, event::StartPreprocess>) {
          require(JobState::Queued);
          next.state = JobState::Preprocessing;
        } else if constexpr (std::is_same_v<E, event::Dispatch>) {
          require(JobState::Preprocessing);
          next.state = JobState::Dispatched;
          if (next.params.seed == -1) next.params.seed = e.resolved_seed;
        } else if constexpr (std::is_same_v<E, event::SamplingStarted>) {
          require(JobState::Dispatched);
          next.state = JobState::Sampling;
        } else if constexpr (std::is_same_v<E, event::Progress>) {
          require(JobState::Sampling);
          if (!std::isnan(e.fraction)) {
            next.progress = std::max(job.progress, std::clamp(e.fraction, 0.0, kMaxSamplingProgress));
          }
        } else if constexpr (std::is_same_v<E, event::Complete>) {
          require(JobState::Sampling);
          next.state = JobState::Completed;
          next.progress = 1.0;
          next.result_refs = e.result_refs;
        } else if constexpr (std::is_same_v<E, event::Fail>) {
          next.state = JobState::Failed;
          next.error = e.message;
        } else if constexpr (std::is_same_v<E, event::Cancel>) {
          next.state = JobState::Canceled;
        }
      },
      ev);
  next.updated_ms = now;
  return next;
}

RenderJob make_job(std::string capture_id, GenerationParams params, Timestamp now) {
  RenderJob job;
  job.id = new_uuid();
  job.capture_id = std::move(capture_id);
  job.params = std::move(params);
  job.created_ms = job.updated_ms = now;
  return job;
}

RenderJob derive_inpaint_job(const RenderJob& parent, std::size_t result_index,
                             const MaskSpec& mask, std::string_view new_prompt,
                             const InpaintOverrides& overrides, Timestamp now) {
  if (parent.state != JobState::Completed) {
    throw Error(ErrorCode::ParentNotCompleted,
                "job " + parent.id + " is " + std::string(to_string(parent.state)));
  }
  if (result_index >= parent.result_refs.size()) {
    throw Error(ErrorCode::InvalidArgument, "result_index out of range");
  }
  if (static_cast<int>(mask.mask.width()) != parent.params.width ||
      static_cast<int>(mask.mask.height()) != parent.params.height) {
    throw Error(ErrorCode::DimensionMismatch, "mask size differs from the parent result");
  }

  GenerationParams p = parent.params;
  p.mode = GenerationMode::Inpaint;
  if (!new_prompt.empty()) p.prompt = std::string(new_prompt);
  p.init_ref = parent.result_refs[result_index];
  p.feather_radius = mask.feather_radius;
  for (auto& u : p.control_units) u.image_ref.clear();
  if (overrides.seed) p.seed = *overrides.seed;
  if (overrides.steps) p.steps = *overrides.steps;
  if (overrides.cfg_scale) p.cfg_scale = *overrides.cfg_scale;
  if (overrides.sampler) p.sampler = *overrides.sampler;
  if (overrides.denoising_strength) p.denoising_strength = *overrides.denoising_strength;
  if (overrides.negative_prompt) p.negative_prompt = *overrides.negative_prompt;
  if (overrides.styles) p.styles = *overrides.styles;
  if (overrides.batch_size) p.batch_size = *overrides.batch_size;

  RenderJob child = make_job(parent.capture_id, std::move(p), now);
  child.params.mask_ref = mask_ref(child.id);
  child.parent_job = parent.id;
  return child;
}

std::string capture_ref(std::string_view capture_id) { return "capture:" + std::string(capture_id); }

std::string result_ref(std::string_view job_id, std::size_t index) {
  return "result:" + std::string(job_id) + "/" + std::to_string(index);
}

std::string mask_ref(std::string_view job_id) { return "mask:" + std::string(job_id); }

std::optional<ImageRef> parse_image_ref(std::string_view ref) {
  auto body = [&](std::string_view prefix) -> std::optional<std::string_view> {
    if (ref.substr(0, prefix.size()) != prefix) return std::nullopt;
    return ref.substr(prefix.size());
  };
  if (auto id = body("capture:"); id && is_token_safe(*id)) {
    return ImageRef{ImageRef::Kind::Capture, std::string(*id)};
  }
  if (auto id = body("mask:"); id && is_token_safe(*id)) {
    return ImageRef{ImageRef::Kind::Mask, std::string(*id)};
  }
  if (auto rest = body("result:")) {
    const auto slash = rest->rfind('/');
    if (slash == std::string_view::npos) return std::nullopt;
    const auto id = rest->substr(0, slash);
    const auto num = rest->substr(slash + 1);
    std::size_t index = 0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), index);
    if (!is_token_safe(id) || num.empty() || ec != std::errc{} || ptr != num.data() + num.size()) {
      return std::nullopt;
    }
    return ImageRef{ImageRef::Kind::Result, std::string(id), index};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- JSON

namespace {

class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix, std::vector<FieldError>& errs)
      : obj_(obj), prefix_(std::move(prefix)), errs_(errs) {}

  const json* find(const char* key) const {
    if (!obj_.is_object()) return nullptr;
    const auto it = obj_.find(key);
    return (it == obj_.end() || it->is_null()) ? nullptr : &*it;
  }

  std::optional<std::string> string(const char* key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) return bad(key, "must be a string");
    return v->get<std::string>();
  }

  template <class Int>
  std::optional<Int> integer(const char* key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_number_integer()) return bad(key, "must be an integer");
    if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(
                                                                 std::numeric_limits<Int>::max())) {
      return bad(key, "integer out of range");
    }
    const auto raw = v->get<std::int64_t>();
    if (raw < std::numeric_limits<Int>::min() || raw > std::numeric_limits<Int>::max()) {
      return bad(key, "integer out of range");
    }
    return static_cast<Int>(raw);
  }

  std::optional<double> number(const char* key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) return bad(key, "must be a number");
    return v->get<double>();
  }

  std::string field(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  std::nullopt_t bad(const char* key, const char* message) {
    errs_.push_back({field(key), message});
    return std::nullopt;
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::vector<FieldError>& errs_;
};

std::optional<GenerationMode> mode_from_string(std::string_view s) {
  for (auto m : {GenerationMode::TextToImage, GenerationMode::ImageToImage, GenerationMode::Inpaint})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

std::vector<StyleRef> styles_from_json(const json& arr, const std::string& field,
                                       std::vector<FieldError>& errs) {
  std::vector<StyleRef> out;
  if (!arr.is_array()) {
    errs.push_back({field, "must be an array"});
    return out;
  }
  for (std::size_t i = 0; i < arr.size(); ++i) {
    FieldReader r(arr[i], field + "[" + std::to_string(i) + "]", errs);
    if (!arr[i].is_object()) {
      errs.push_back({r.field("name"), "style entries must be objects"});
      continue;
    }
    StyleRef s;
    if (auto n = r.string("name")) s.name = *n;
    else if (!r.find("name")) r.bad("name", "required");
    s.weight = r.number("weight");
    out.push_back(std::move(s));
  }
  return out;
}

json styles_to_json(const std::vector<StyleRef>& styles) {
  json arr = json::array();
  for (const auto& s : styles) {
    json o{{"name", s.name}};
    if (s.weight) o["weight"] = *s.weight;
    arr.push_back(std::move(o));
  }
  return arr;
}

}  // namespace

json to_json(const GenerationParams& p) {
  json j{{"prompt", p.prompt},
         {"negative_prompt", p.negative_prompt},
         {"seed", p.seed},
         {"width", p.width},
         {"height", p.height},
         {"mode", to_string(p.mode)},
         {"styles", styles_to_json(p.styles)},
         {"feather_radius", p.feather_radius}};
  if (p.steps) j["steps"] = *p.steps;
  if (p.cfg_scale) j["cfg_scale"] = *p.cfg_scale;
  if (p.sampler) j["sampler"] = *p.sampler;
  if (p.denoising_strength) j["denoising_strength"] = *p.denoising_strength;
  if (p.batch_size) j["batch_size"] = *p.batch_size;
  if (!p.init_ref.empty()) j["init_ref"] = p.init_ref;
  if (!p.mask_ref.empty()) j["mask_ref"] = p.mask_ref;
  json units = json::array();
  for (const auto& u : p.control_units) {
    json o{{"kind", to_string(u.kind)},
           {"weight", u.weight},
           {"guidance_start", u.guidance_start},
           {"guidance_end", u.guidance_end}};
    if (!u.image_ref.empty()) o["image_ref"] = u.image_ref;
    units.push_back(std::move(o));
  }
  j["control_units"] = std::move(units);
  return j;
}

GenerationParams params_from_json(const json& j) {
  std::vector<FieldError> errs;
  if (!j.is_object()) throw ValidationError(std::vector<FieldError>{{"params", "must be an object"}});
  FieldReader r(j, "", errs);
  GenerationParams p;
  if (auto v = r.string("prompt")) p.prompt = *v;
  if (auto v = r.string("negative_prompt")) p.negative_prompt = *v;
  if (auto v = r.integer<std::int64_t>("seed")) p.seed = *v;
  p.steps = r.integer<int>("steps");
  p.cfg_scale = r.number("cfg_scale");
  p.sampler = r.string("sampler");
  if (auto v = r.integer<int>("width")) p.width = *v;
  if (auto v = r.integer<int>("height")) p.height = *v;
  if (auto v = r.string("mode")) {
    if (auto m = mode_from_string(*v)) p.mode = *m;
    else r.bad("mode", "must be one of txt2img, img2img, inpaint");
  }
  p.denoising_strength = r.number("denoising_strength");
  p.batch_size = r.integer<int>("batch_size");
  if (auto v = r.string("init_ref")) p.init_ref = *v;
  if (auto v = r.string("mask_ref")) p.mask_ref = *v;
  if (auto v = r.integer<int>("feather_radius")) p.feather_radius = *v;
  if (const json* styles = r.find("styles")) p.styles = styles_from_json(*styles, "styles", errs);
  if (const json* units = r.find("control_units")) {
    if (!units->is_array()) {
      r.bad("control_units", "must be an array");
    } else {
      for (std::size_t i = 0; i < units->size(); ++i) {
        const std::string at = "control_units[" + std::to_string(i) + "]";
        FieldReader u(units->at(i), at, errs);
        ControlUnit unit;
        if (auto k = u.string("kind")) {
          if (*k == "edge") unit.kind = ControlKind::Edge;
          else if (*k == "depth") unit.kind = ControlKind::Depth;
          else u.bad("kind", "must be edge or depth");
        } else if (!u.find("kind")) {
          u.bad("kind", "required");
        }
        if (auto v = u.number("weight")) unit.weight = *v;
        if (auto v = u.number("guidance_start")) unit.guidance_start = *v;
        if (auto v = u.number("guidance_end")) unit.guidance_end = *v;
        if (auto v = u.string("image_ref")) unit.image_ref = *v;
        p.control_units.push_back(std::move(unit));
      }
    }
  }
  if (!errs.empty()) throw ValidationError(std::move(errs));
  return p;
}

InpaintOverrides overrides_from_json(const json& j) {
  InpaintOverrides o;
  if (j.is_null()) return o;
  if (!j.is_object()) throw ValidationError(std::vector<FieldError>{{"overrides", "must be an object"}});
  std::vector<FieldError> errs;
  FieldReader r(j, "overrides", errs);
  o.seed = r.integer<std::int64_t>("seed");
  o.steps = r.integer<int>("steps");
  o.cfg_scale = r.number("cfg_scale");
  o.sampler = r.string("sampler");
  o.denoising_strength = r.number("denoising_strength");
  o.negative_prompt = r.string("negative_prompt");
  o.batch_size = r.integer<int>("batch_size");
  if (const json* styles = r.find("styles")) o.styles = styles_from_json(*styles, "overrides.styles", errs);
  if (!errs.empty()) throw ValidationError(std::move(errs));
  return o;
}

json to_json(const RenderJob& job) {
  json j{{"id", job.id},
         {"capture_id", job.capture_id},
         {"params", to_json(job.params)},
         {"state", to_string(job.state)},
         {"progress", job.progress},
         {"result_refs", job.result_refs},
         {"created_ms", job.created_ms},
         {"updated_ms", job.updated_ms}};
  j["error"] = job.error ? json(*job.error) : json(nullptr);
  j["parent_job"] = job.parent_job ? json(*job.parent_job) : json(nullptr);
  return j;
}

RenderJob job_from_json(const json& j) {
  try {
    RenderJob job;
    job.id = j.at("id").get<std::string>();
    job.capture_id = j.at("capture_id").get<std::string>();
    job.params = params_from_json(j.at("params"));
    const auto state = job_state_from_string(j.at("state").get<std::string>());
    if (!state) throw Error(ErrorCode::InvalidArgument, "unknown job state");
    job.state = *state;
    job.progress = j.at("progress").get<double>();
    job.result_refs = j.at("result_refs").get<std::vector<std::string>>();
    job.created_ms = j.at("created_ms").get<Timestamp>();
    job.updated_ms = j.at("updated_ms").get<Timestamp>();
    if (j.contains("error") && !j["error"].is_null()) job.error = j["error"].get<std::string>();
    if (j.contains("parent_job") && !j["parent_job"].is_null()) {
      job.parent_job = j["parent_job"].get<std::string>();
    }
    return job;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed job document: ") + e.what());
  } catch (const ValidationError& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed job params: ") + e.what());
  }
}

json to_json(const StyleEntry& s) {
  return json{{"name", s.name},
              {"display_name", s.display_name},
              {"default_weight", s.default_weight},
              {"description", s.description}};
}

}  // namespace atelier
