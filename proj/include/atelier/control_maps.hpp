#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "atelier/raster.hpp"

namespace atelier {

/// Per-pixel depth in model units, nearer = smaller. Background pixels hold
/// +infinity.
class DepthBuffer {
 public:
  static constexpr double kBackground = std::numeric_limits<double>::infinity();

  DepthBuffer() = default;
  /// Throws InvalidDepth when a finite value is not strictly positive.
  DepthBuffer(std::uint32_t width, std::uint32_t height, std::vector<double> values);

  std::uint32_t width() const noexcept { return width_; }
  std::uint32_t height() const noexcept { return height_; }
  std::span<const double> values() const noexcept { return values_; }
  double at(std::uint32_t x, std::uint32_t y) const noexcept {
    return values_[static_cast<std::size_t>(y) * width_ + x];
  }

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<double> values_;
};

/// 16-bit depth PNG: v in [0, 65534] maps linearly onto [near, far];
/// v == 65535 is background.
inline constexpr std::uint16_t kDepthBackgroundCode = 65535;

DepthBuffer depth_from_png16(const RasterImage& img, double near, double far);

/// Thresholds are on the Sobel magnitude divided by 4. The defaults equal the
/// usual 100/200 pair applied to the unscaled magnitude.
struct CannySettings {
  int low_threshold = 25;
  int high_threshold = 50;
  double sigma = 1.4;

  /// Throws InvalidArgument unless 0 < low <= high <= 255 and sigma in (0, 10].
  void validate() const;
  friend bool operator==(const CannySettings&, const CannySettings&) = default;
};

struct DepthSettings {
  double clip_percentile = 0.02;

  void validate() const;
  friend bool operator==(const DepthSettings&, const DepthSettings&) = default;
};

struct Gradients {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<double> gx;
  std::vector<double> gy;
  std::vector<double> magnitude;
  std::vector<double> direction;  // atan2(gy, gx), radians
};

/// 3x3 Sobel with replicate borders. Throws ImageTooSmall below 3x3.
Gradients sobel_gradients(const GrayImage& img);

/// Blur, Sobel, 4-bin non-maximum suppression, double threshold and
/// 8-connected hysteresis. Output pixels are 0 or 255.
GrayImage canny_edges(const GrayImage& img, const CannySettings& settings);

/// Near-is-bright 8-bit depth map; background pixels become 0.
/// Throws NoGeometry when every pixel is background.
GrayImage normalize_depth(const DepthBuffer& depth, double clip_percentile);

struct MaskSpec {
  GrayImage mask;  // 255 = regenerate, 0 = keep
  int feather_radius = 0;
};

GrayImage feather_mask(const MaskSpec& spec);

/// out = round((alpha*generated + (255-alpha)*original) / 255) on every
/// Rgba8 channel. Throws DimensionMismatch.
RasterImage composite(const RasterImage& original, const RasterImage& generated,
                      const GrayImage& alpha);

struct ControlFlags {
  bool edge = true;
  bool depth = false;
};

struct ControlSet {
  std::optional<GrayImage> edge;
  std::optional<GrayImage> depth;
  CannySettings canny;
  DepthSettings depth_settings;
};

ControlSet build_control_set(const RasterImage& capture, const DepthBuffer* depth,
                             const CannySettings& canny, const DepthSettings& depth_settings,
                             ControlFlags enabled);

}  // namespace atelier
