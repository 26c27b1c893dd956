#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace atelier {

/// Service-wide cap on either image dimension.
inline constexpr std::uint32_t kMaxDimension = 16384;

enum class Channels : std::uint8_t { Gray8, Gray16, Rgba8 };

constexpr std::size_t bytes_per_pixel(Channels c) noexcept {
  switch (c) {
    case Channels::Gray8:
      return 1;
    case Channels::Gray16:
      return 2;
    case Channels::Rgba8:
      return 4;
  }
  return 0;
}

/// Row-major pixel grid. Gray16 samples are stored big-endian, two bytes
/// per pixel, exactly as they appear in a PNG scanline.
class RasterImage {
 public:
  RasterImage() = default;
  /// Zero-filled image. Throws InvalidArgument on a bad size.
  RasterImage(std::uint32_t width, std::uint32_t height, Channels channels);
  RasterImage(std::uint32_t width, std::uint32_t height, Channels channels,
              std::vector<std::uint8_t> data);

  std::uint32_t width() const noexcept { return width_; }
  std::uint32_t height() const noexcept { return height_; }
  Channels channels() const noexcept { return channels_; }
  std::size_t stride() const noexcept { return width_ * bytes_per_pixel(channels_); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  std::uint8_t* pixel(std::uint32_t x, std::uint32_t y) noexcept {
    return data_.data() + static_cast<std::size_t>(y) * stride() + x * bytes_per_pixel(channels_);
  }
  const std::uint8_t* pixel(std::uint32_t x, std::uint32_t y) const noexcept {
    return data_.data() + static_cast<std::size_t>(y) * stride() + x * bytes_per_pixel(channels_);
  }

  std::uint16_t gray16(std::uint32_t x, std::uint32_t y) const noexcept {
    const auto* p = pixel(x, y);
    return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
  }
  void set_gray16(std::uint32_t x, std::uint32_t y, std::uint16_t v) noexcept {
    auto* p = pixel(x, y);
    p[0] = static_cast<std::uint8_t>(v >> 8);
    p[1] = static_cast<std::uint8_t>(v & 0xFF);
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  Channels channels_ = Channels::Gray8;
  std::vector<std::uint8_t> data_;
};

/// Single-channel 8-bit image: edge maps, depth maps, masks, alpha.
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(std::uint32_t width, std::uint32_t height, std::uint8_t fill = 0);
  GrayImage(std::uint32_t width, std::uint32_t height, std::vector<std::uint8_t> data);

  std::uint32_t width() const noexcept { return width_; }
  std::uint32_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::uint8_t& at(std::uint32_t x, std::uint32_t y) noexcept {
    return data_[static_cast<std::size_t>(y) * width_ + x];
  }
  std::uint8_t at(std::uint32_t x, std::uint32_t y) const noexcept {
    return data_[static_cast<std::size_t>(y) * width_ + x];
  }

  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Throws MalformedPng or UnsupportedPng.
RasterImage decode_png(std::span<const std::uint8_t> bytes);

/// Deterministic: filter None on every row, zlib level 6, only IHDR/IDAT/IEND.
std::vector<std::uint8_t> encode_png(const RasterImage& img);

RasterImage to_raster(const GrayImage& img);
/// Gray8 or Gray16 RasterImage -> GrayImage. Gray16 keeps the high byte.
GrayImage as_gray(const RasterImage& img);
/// Gray8 replicated into RGB with opaque alpha; Rgba8 passes through.
RasterImage to_rgba(const RasterImage& img);

/// BT.601 luma with round-half-up. Throws UnsupportedChannels on Gray16.
GrayImage to_grayscale(const RasterImage& img);

/// Half-pixel-center bilinear resampling, any channel layout.
RasterImage resize_bilinear(const RasterImage& img, std::uint32_t new_width,
                            std::uint32_t new_height);
GrayImage resize_bilinear(const GrayImage& img, std::uint32_t new_width,
                          std::uint32_t new_height);

/// Normalized 1-D gaussian taps, index 0 = offset -radius, radius = ceil(3*sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable gaussian, replicate borders, one rounding at the end.
/// sigma must lie in (0, 10].
GrayImage gaussian_blur(const GrayImage& img, double sigma);

GrayImage mirror_horizontal(const GrayImage& img);
/// Clockwise quarter turn.
GrayImage rotate90(const GrayImage& img);

}  // namespace atelier
