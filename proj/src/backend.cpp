#include "atelier/backend.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "atelier/encoding.hpp"

namespace atelier {

void BackendRequest::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
  if (width == 0 || height == 0 || width > kMaxDimension || height > kMaxDimension)
    fail("request size out of range");
  if (steps < 1) fail("steps must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(denoising_strength >= 0.0 && denoising_strength <= 1.0))
    fail("denoising_strength must lie in [0, 1]");

  const bool wants_init = mode != GenerationMode::TextToImage;
  const bool wants_mask = mode == GenerationMode::Inpaint;
  if (init_image.has_value() != wants_init)
    fail(wants_init ? "init_image required" : "init_image not allowed for txt2img");
  if (mask_alpha.has_value() != wants_mask)
    fail(wants_mask ? "mask_alpha required" : "mask_alpha only allowed for inpaint");
  if (init_image) {
    if (init_image->channels() != Channels::Rgba8) fail("init_image must be RGBA");
    if (init_image->width() != width || init_image->height() != height)
      fail("init_image size differs from request");
  }
  if (mask_alpha && (mask_alpha->width() != width || mask_alpha->height() != height))
    fail("mask_alpha size differs from request");
  for (const auto& c : control_images) {
    if (c.image.width() != width || c.image.height() != height)
      fail("control image size differs from request");
  }
}

// ---------------------------------------------------------------------------
// Mock

namespace {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint32_t kNoiseCell = 32;

std::uint8_t round_u8(double v) noexcept {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, std::uint64_t prompt_hash, std::uint32_t w, std::uint32_t h)
      : key_(splitmix64(splitmix64(splitmix64(seed) ^ prompt_hash) ^
                        ((static_cast<std::uint64_t>(w) << 32) | h))) {}

  double at(std::uint32_t x, std::uint32_t y, int channel) const noexcept {
    const double fx = (x + 0.5) / kNoiseCell;
    const double fy = (y + 0.5) / kNoiseCell;
    const auto ix = static_cast<std::uint64_t>(fx);
    const auto iy = static_cast<std::uint64_t>(fy);
    const double tx = smooth(fx - static_cast<double>(ix));
    const double ty = smooth(fy - static_cast<double>(iy));
    const double a = lattice(ix, iy, channel), b = lattice(ix + 1, iy, channel);
    const double c = lattice(ix, iy + 1, channel), d = lattice(ix + 1, iy + 1, channel);
    const double top = a + (b - a) * tx;
    const double bottom = c + (d - c) * tx;
    return top + (bottom - top) * ty;
  }

 private:
  static double smooth(double t) noexcept { return t * t * (3.0 - 2.0 * t); }

  double lattice(std::uint64_t ix, std::uint64_t iy, int channel) const noexcept {
    const std::uint64_t cell = (ix << 40) ^ (iy << 16) ^ static_cast<std::uint64_t>(channel);
    return static_cast<double>(splitmix64(key_ ^ splitmix64(cell)) & 0xFF);
  }

  std::uint64_t key_;
};

RasterImage mock_image(const BackendRequest& req, std::uint64_t seed) {
  const std::uint64_t prompt_hash = fnv1a64(req.final_prompt);
  const ValueNoise noise(seed, prompt_hash, req.width, req.height);
  const std::uint8_t tint[3] = {static_cast<std::uint8_t>(prompt_hash & 0xFF),
                                static_cast<std::uint8_t>((prompt_hash >> 8) & 0xFF),
                                static_cast<std::uint8_t>((prompt_hash >> 16) & 0xFF)};

  RasterImage out(req.width, req.height, Channels::Rgba8);
  for (std::uint32_t y = 0; y < req.height; ++y) {
    for (std::uint32_t x = 0; x < req.width; ++x) {
      auto* p = out.pixel(x, y);
      for (int c = 0; c < 3; ++c) p[c] = round_u8(0.6 * noise.at(x, y, c) + 0.4 * tint[c]);
      p[3] = 255;
    }
  }

  // Edge conditioning shows up as white strokes so tests can see it.
  for (const auto& unit : req.control_images) {
    if (unit.kind != ControlKind::Edge) continue;
    const double opacity = std::clamp(unit.weight / 2.0, 0.0, 1.0);
    for (std::uint32_t y = 0; y < req.height; ++y) {
      for (std::uint32_t x = 0; x < req.width; ++x) {
        if (unit.image.at(x, y) != 255) continue;
        auto* p = out.pixel(x, y);
        for (int c = 0; c < 3; ++c) p[c] = round_u8((1.0 - opacity) * p[c] + opacity * 255.0);
      }
    }
  }

  if (req.init_image) {
    const double s = req.denoising_strength;
    const auto init = req.init_image->data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = round_u8((1.0 - s) * init[i] + s * dst[i]);
  }
  if (req.mode == GenerationMode::Inpaint) out = composite(*req.init_image, out, *req.mask_alpha);
  return out;
}

}  // namespace

BackendResult mock_generate(const BackendRequest& req) {
  req.validate();
  BackendResult result;
  result.images.reserve(static_cast<std::size_t>(req.batch_size));
  // Batch members use consecutive seeds, as the webui does.
  for (int i = 0; i < req.batch_size; ++i)
    result.images.push_back(mock_image(req, static_cast<std::uint64_t>(req.seed) + i));
  nlohmann::json info = {{"backend", "mock"}, {"seed", req.seed}};
  result.info = info.dump();
  return result;
}

BackendResult MockBackend::generate(const BackendRequest& req, const ProgressSink& progress,
                                    std::stop_token stop) {
  if (!available_) throw Error(ErrorCode::BackendUnavailable, "mock backend offline");
  req.validate();
  for (int i = 1; i <= req.steps; ++i) {
    if (stop.stop_requested()) throw Error(ErrorCode::Canceled, "generation canceled");
    if (options_.step_delay.count() > 0) std::this_thread::sleep_for(options_.step_delay);
    if (i < req.steps && progress) progress(static_cast<double>(i) / req.steps);
  }
  if (stop.stop_requested()) throw Error(ErrorCode::Canceled, "generation canceled");
  auto result = mock_generate(req);
  if (progress) progress(1.0);
  return result;
}

}  // namespace atelier
