#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "atelier/control_maps.hpp"
#include "atelier/error.hpp"

namespace atelier {

DepthBuffer::DepthBuffer(std::uint32_t width, std::uint32_t height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
  if (width == 0 || height == 0 || values_.size() != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::InvalidArgument, "depth buffer length does not match dimensions");
  }
  for (double v : values_) {
    if (std::isnan(v) || v <= 0.0 || v == -kBackground) {
      throw Error(ErrorCode::InvalidDepth, "depth values must be positive or background");
    }
  }
}

DepthBuffer depth_from_png16(const RasterImage& img, double near, double far) {
  if (img.channels() != Channels::Gray16) {
    throw Error(ErrorCode::InvalidDepth, "depth image must be 16-bit grayscale");
  }
  if (!(near > 0.0) || !(near < far) || !std::isfinite(far)) {
    throw Error(ErrorCode::InvalidDepth, "depth range requires 0 < near < far");
  }
  std::vector<double> values(static_cast<std::size_t>(img.width()) * img.height());
  for (std::uint32_t y = 0; y < img.height(); ++y) {
    for (std::uint32_t x = 0; x < img.width(); ++x) {
      const std::uint16_t code = img.gray16(x, y);
      values[static_cast<std::size_t>(y) * img.width() + x] =
          code == kDepthBackgroundCode ? DepthBuffer::kBackground
                                       : near + (far - near) * code / 65534.0;
    }
  }
  return DepthBuffer(img.width(), img.height(), std::move(values));
}

void CannySettings::validate() const {
  if (!(0 < low_threshold && low_threshold <= high_threshold && high_threshold <= 255)) {
    throw Error(ErrorCode::InvalidArgument, "canny thresholds require 0 < low <= high <= 255");
  }
  if (!(sigma > 0.0 && sigma <= 10.0)) {
    throw Error(ErrorCode::InvalidArgument, "canny sigma must lie in (0, 10]");
  }
}

void DepthSettings::validate() const {
  if (!(clip_percentile >= 0.0 && clip_percentile < 0.5)) {
    throw Error(ErrorCode::InvalidArgument, "clip percentile must lie in [0, 0.5)");
  }
}

Gradients sobel_gradients(const GrayImage& img) {
  if (img.width() < 3 || img.height() < 3) {
    throw Error(ErrorCode::ImageTooSmall, "gradient operators need at least 3x3 pixels");
  }
  const int w = static_cast<int>(img.width());
  const int h = static_cast<int>(img.height());
  const std::size_t n = static_cast<std::size_t>(w) * h;

  Gradients g{img.width(), img.height(), std::vector<double>(n), std::vector<double>(n),
              std::vector<double>(n), std::vector<double>(n)};
  auto at = [&](int x, int y) -> int {
    return img.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1));
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int gx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)) -
                     (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
      const int gy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)) -
                     (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      g.gx[i] = gx;
      g.gy[i] = gy;
      g.magnitude[i] = std::sqrt(static_cast<double>(gx * gx + gy * gy));
      g.direction[i] = std::atan2(static_cast<double>(gy), static_cast<double>(gx));
    }
  }
  return g;
}

namespace {

// Axis of the quantized gradient direction, before orienting it along +g.
struct Axis {
  int dx;
  int dy;
};

Axis quantize_direction(double radians) {
  double deg = radians * 180.0 / std::numbers::pi;
  if (deg < 0.0) deg += 180.0;
  if (deg >= 180.0) deg -= 180.0;
  if (deg < 22.5 || deg >= 157.5) return {1, 0};
  if (deg < 67.5) return {1, 1};
  if (deg < 112.5) return {0, 1};
  return {1, -1};
}

}  // namespace

GrayImage canny_edges(const GrayImage& img, const CannySettings& settings) {
  settings.validate();
  if (img.width() < 3 || img.height() < 3) {
    throw Error(ErrorCode::ImageTooSmall, "edge detection needs at least 3x3 pixels");
  }
  const Gradients g = sobel_gradients(gaussian_blur(img, settings.sigma));
  const int w = static_cast<int>(img.width());
  const int h = static_cast<int>(img.height());
  const std::size_t n = static_cast<std::size_t>(w) * h;

  // Sobel responses peak at 4 * 255; rescale so thresholds read in 0..255.
  std::vector<double> mag(n);
  std::transform(g.magnitude.begin(), g.magnitude.end(), mag.begin(),
                 [](double m) { return m / 4.0; });
  auto mag_at = [&](int x, int y) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return mag[static_cast<std::size_t>(y) * w + x];
  };

  // Ties along the gradient go to the pixel the gradient points into, which
  // keeps one pixel per flat-topped ridge and commutes with rotation.
  std::vector<double> thin(n, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double m = mag[i];
      if (m <= 0.0) continue;
      Axis a = quantize_direction(g.direction[i]);
      if (a.dx * g.gx[i] + a.dy * g.gy[i] < 0.0) a = {-a.dx, -a.dy};
      if (m > mag_at(x + a.dx, y + a.dy) && m >= mag_at(x - a.dx, y - a.dy)) thin[i] = m;
    }
  }

  constexpr std::uint8_t kWeak = 1;
  constexpr std::uint8_t kStrong = 2;
  std::vector<std::uint8_t> cls(n, 0);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < n; ++i) {
    if (thin[i] >= settings.high_threshold) {
      cls[i] = kStrong;
      stack.push_back(i);
    } else if (thin[i] >= settings.low_threshold) {
      cls[i] = kWeak;
    }
  }

  GrayImage out(img.width(), img.height());
  auto px = out.data();
  for (std::size_t i : stack) px[i] = 255;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % w);
    const int y = static_cast<int>(i / w);
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx;
        const int ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
        if (cls[j] == kWeak && px[j] == 0) {
          px[j] = 255;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

GrayImage normalize_depth(const DepthBuffer& depth, double clip_percentile) {
  DepthSettings{clip_percentile}.validate();
  std::vector<double> finite;
  finite.reserve(depth.values().size());
  for (double v : depth.values())
    if (std::isfinite(v)) finite.push_back(v);
  if (finite.empty()) throw Error(ErrorCode::NoGeometry, "depth buffer has no finite pixels");
  std::sort(finite.begin(), finite.end());

  const double near = percentile(finite, clip_percentile);
  const double far = percentile(finite, 1.0 - clip_percentile);

  GrayImage out(depth.width(), depth.height());
  auto dst = out.data();
  const auto src = depth.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!std::isfinite(src[i])) continue;
    if (far == near) {
      dst[i] = 255;
      continue;
    }
    const double d = std::clamp(src[i], near, far);
    dst[i] = static_cast<std::uint8_t>(
        std::clamp(std::floor(255.0 * (far - d) / (far - near) + 0.5), 0.0, 255.0));
  }
  return out;
}

GrayImage feather_mask(const MaskSpec& spec) {
  if (spec.feather_radius < 0 || spec.feather_radius > 30) {
    throw Error(ErrorCode::InvalidArgument, "feather radius must lie in [0, 30]");
  }
  if (spec.feather_radius == 0) return spec.mask;
  return gaussian_blur(spec.mask, spec.feather_radius / 3.0);
}

RasterImage composite(const RasterImage& original, const RasterImage& generated,
                      const GrayImage& alpha) {
  if (original.channels() != Channels::Rgba8 || generated.channels() != Channels::Rgba8) {
    throw Error(ErrorCode::UnsupportedChannels, "composite expects Rgba8 images");
  }
  if (original.width() != generated.width() || original.height() != generated.height() ||
      original.width() != alpha.width() || original.height() != alpha.height()) {
    throw Error(ErrorCode::DimensionMismatch, "composite inputs differ in size");
  }
  RasterImage out = original;
  auto dst = out.data();
  const auto gen = generated.data();
  const auto a = alpha.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const unsigned al = a[i];
    if (al == 0) continue;
    for (std::size_t c = 0; c < 4; ++c) {
      const unsigned mixed = al * gen[i * 4 + c] + (255u - al) * dst[i * 4 + c];
      dst[i * 4 + c] = static_cast<std::uint8_t>((mixed + 127u) / 255u);
    }
  }
  return out;
}

ControlSet build_control_set(const RasterImage& capture, const DepthBuffer* depth,
                             const CannySettings& canny, const DepthSettings& depth_settings,
                             ControlFlags enabled) {
  if (!enabled.edge && !enabled.depth) {
    throw Error(ErrorCode::InvalidArgument, "at least one control map must be enabled");
  }
  ControlSet set{std::nullopt, std::nullopt, canny, depth_settings};
  if (enabled.depth) {
    if (depth == nullptr) throw Error(ErrorCode::MissingDepth, "depth control requires a depth buffer");
    if (depth->width() != capture.width() || depth->height() != capture.height()) {
      throw Error(ErrorCode::DimensionMismatch, "depth buffer size differs from capture");
    }
    set.depth = normalize_depth(*depth, depth_settings.clip_percentile);
  }
  if (enabled.edge) set.edge = canny_edges(to_grayscale(capture), canny);
  return set;
}

}  // namespace atelier
