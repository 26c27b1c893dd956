#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/job_model.hpp"
#include "atelier/raster.hpp"
#include "json.hpp"

namespace atelier {

struct ControlImage {
  ControlKind kind = ControlKind::Edge;
  GrayImage image;
  double weight = 1.0;
  double guidance_start = 0.0;
  double guidance_end = 1.0;
};

/// Everything a backend needs for one dispatch. All images are already at
/// width x height; the seed is concrete.
struct BackendRequest {
  std::string final_prompt;
  std::string negative_prompt;
  std::int64_t seed = 0;
  int steps = kDefaultSteps;
  double cfg_scale = kDefaultCfgScale;
  std::string sampler{kDefaultSampler};
  std::uint32_t width = 512;
  std::uint32_t height = 512;
  GenerationMode mode = GenerationMode::TextToImage;
  int batch_size = 1;
  std::optional<RasterImage> init_image;  // Rgba8
  std::optional<GrayImage> mask_alpha;    // feathered, 255 = regenerate
  double denoising_strength = kDefaultDenoising;
  std::vector<ControlImage> control_images;

  /// Throws InvalidArgument on mode-inconsistent inputs or size mismatches.
  void validate() const;
};

struct BackendResult {
  std::vector<RasterImage> images;  // Rgba8, width x height each
  std::string info;
};

/// Receives non-decreasing fractions; the last call on success is 1.0.
using ProgressSink = std::function<void(double)>;

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string name() const = 0;
  virtual bool healthy() = 0;
  /// Throws BackendUnavailable, BackendRejected, Timeout, MalformedResponse,
  /// or Canceled once `stop` is requested.
  virtual BackendResult generate(const BackendRequest& req, const ProgressSink& progress,
                                 std::stop_token stop = {}) = 0;
};

/// Procedural stand-in for a diffusion model. Pure function of the request.
BackendResult mock_generate(const BackendRequest& req);

class MockBackend final : public Backend {
 public:
  struct Options {
    std::chrono::milliseconds step_delay{0};
  };

  MockBackend() = default;
  explicit MockBackend(Options options) : options_(options) {}

  std::string name() const override { return "mock"; }
  bool healthy() override { return available_; }
  BackendResult generate(const BackendRequest& req, const ProgressSink& progress,
                         std::stop_token stop = {}) override;

  /// Simulates an unreachable backend.
  void set_available(bool available) { available_ = available; }

 private:
  Options options_;
  bool available_ = true;
};

struct A1111Options {
  std::string base_url = "http://127.0.0.1:7860";
  std::string edge_model = "control_v11p_sd15_canny";
  std::string depth_model = "control_v11f1p_sd15_depth";
  std::chrono::milliseconds timeout{120000};
  std::chrono::milliseconds poll_interval{500};
};

/// "/sdapi/v1/txt2img" or "/sdapi/v1/img2img".
std::string_view a1111_endpoint(GenerationMode mode) noexcept;

/// Request body for the webui API. Serialize with dump() for the canonical
/// form: sorted keys, no whitespace.
nlohmann::json a1111_build_payload(const BackendRequest& req, const A1111Options& options = {});

/// Throws MalformedResponse; MalformedPng from the embedded images propagates.
BackendResult a1111_parse_response(const nlohmann::json& body);
BackendResult a1111_parse_response(std::string_view body);

/// Reads "progress" from GET /sdapi/v1/progress, clamped to [0, 1].
/// Throws BackendUnavailable.
double a1111_poll_progress(const std::string& base_url,
                           std::chrono::milliseconds timeout = std::chrono::seconds(5));

class A1111Backend final : public Backend {
 public:
  explicit A1111Backend(A1111Options options) : options_(std::move(options)) {}

  std::string name() const override { return "a1111"; }
  bool healthy() override;
  BackendResult generate(const BackendRequest& req, const ProgressSink& progress,
                         std::stop_token stop = {}) override;

  const A1111Options& options() const noexcept { return options_; }

 private:
  A1111Options options_;
};

}  // namespace atelier
