#include <algorithm>
#include <cmath>
#include <string>

#include "atelier/error.hpp"
#include "atelier/raster.hpp"

namespace atelier {

namespace {

void check_dimensions(std::uint32_t width, std::uint32_t height) {
  if (width == 0 || height == 0 || width > kMaxDimension || height > kMaxDimension) {
    throw Error(ErrorCode::InvalidArgument,
                "image dimensions " + std::to_string(width) + "x" + std::to_string(height) +
                    " outside [1, " + std::to_string(kMaxDimension) + "]");
  }
}

std::uint8_t round_to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

struct Tap {
  std::uint32_t i0;
  std::uint32_t i1;
  double frac;
};

std::vector<Tap> bilinear_taps(std::uint32_t src, std::uint32_t dst) {
  std::vector<Tap> taps(dst);
  const double scale = static_cast<double>(src) / dst;
  for (std::uint32_t i = 0; i < dst; ++i) {
    const double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
    const auto i0 = static_cast<std::uint32_t>(std::floor(s));
    const auto i1 = std::min(i0 + 1, src - 1);
    taps[i] = {i0, i1, s - i0};
  }
  return taps;
}

}  // namespace

RasterImage::RasterImage(std::uint32_t width, std::uint32_t height, Channels channels)
    : width_(width), height_(height), channels_(channels) {
  check_dimensions(width, height);
  data_.assign(static_cast<std::size_t>(width) * height * bytes_per_pixel(channels), 0);
}

RasterImage::RasterImage(std::uint32_t width, std::uint32_t height, Channels channels,
                         std::vector<std::uint8_t> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  check_dimensions(width, height);
  if (data_.size() != static_cast<std::size_t>(width) * height * bytes_per_pixel(channels)) {
    throw Error(ErrorCode::InvalidArgument, "pixel buffer length does not match dimensions");
  }
}

GrayImage::GrayImage(std::uint32_t width, std::uint32_t height, std::uint8_t fill)
    : width_(width), height_(height) {
  check_dimensions(width, height);
  data_.assign(static_cast<std::size_t>(width) * height, fill);
}

GrayImage::GrayImage(std::uint32_t width, std::uint32_t height, std::vector<std::uint8_t> data)
    : width_(width), height_(height), data_(std::move(data)) {
  check_dimensions(width, height);
  if (data_.size() != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::InvalidArgument, "pixel buffer length does not match dimensions");
  }
}

RasterImage to_raster(const GrayImage& img) {
  return RasterImage(img.width(), img.height(), Channels::Gray8,
                     std::vector<std::uint8_t>(img.data().begin(), img.data().end()));
}

GrayImage as_gray(const RasterImage& img) {
  switch (img.channels()) {
    case Channels::Gray8:
      return GrayImage(img.width(), img.height(),
                       std::vector<std::uint8_t>(img.data().begin(), img.data().end()));
    case Channels::Gray16: {
      GrayImage out(img.width(), img.height());
      for (std::uint32_t y = 0; y < img.height(); ++y)
        for (std::uint32_t x = 0; x < img.width(); ++x) out.at(x, y) = img.pixel(x, y)[0];
      return out;
    }
    case Channels::Rgba8:
      break;
  }
  throw Error(ErrorCode::UnsupportedChannels, "expected a single-channel image");
}

RasterImage to_rgba(const RasterImage& img) {
  if (img.channels() == Channels::Rgba8) return img;
  const GrayImage gray = as_gray(img);
  RasterImage out(img.width(), img.height(), Channels::Rgba8);
  auto dst = out.data();
  const auto src = gray.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i * 4 + 0] = dst[i * 4 + 1] = dst[i * 4 + 2] = src[i];
    dst[i * 4 + 3] = 255;
  }
  return out;
}

GrayImage to_grayscale(const RasterImage& img) {
  switch (img.channels()) {
    case Channels::Gray8:
      return as_gray(img);
    case Channels::Gray16:
      throw Error(ErrorCode::UnsupportedChannels, "to_grayscale does not accept Gray16");
    case Channels::Rgba8:
      break;
  }
  GrayImage out(img.width(), img.height());
  const auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    // Integer BT.601 weights in thousandths; +500 rounds half up exactly.
    const unsigned luma = 299u * src[i * 4] + 587u * src[i * 4 + 1] + 114u * src[i * 4 + 2];
    dst[i] = static_cast<std::uint8_t>((luma + 500u) / 1000u);
  }
  return out;
}

RasterImage resize_bilinear(const RasterImage& img, std::uint32_t new_width,
                            std::uint32_t new_height) {
  check_dimensions(new_width, new_height);
  if (new_width == img.width() && new_height == img.height()) return img;

  const auto xs = bilinear_taps(img.width(), new_width);
  const auto ys = bilinear_taps(img.height(), new_height);
  RasterImage out(new_width, new_height, img.channels());

  const bool wide = img.channels() == Channels::Gray16;
  const std::size_t samples = img.channels() == Channels::Rgba8 ? 4 : 1;
  auto sample = [&](std::uint32_t x, std::uint32_t y, std::size_t c) -> double {
    return wide ? img.gray16(x, y) : img.pixel(x, y)[c];
  };

  for (std::uint32_t y = 0; y < new_height; ++y) {
    const Tap& ty = ys[y];
    for (std::uint32_t x = 0; x < new_width; ++x) {
      const Tap& tx = xs[x];
      for (std::size_t c = 0; c < samples; ++c) {
        const double top = (1.0 - tx.frac) * sample(tx.i0, ty.i0, c) + tx.frac * sample(tx.i1, ty.i0, c);
        const double bottom = (1.0 - tx.frac) * sample(tx.i0, ty.i1, c) + tx.frac * sample(tx.i1, ty.i1, c);
        const double v = std::floor((1.0 - ty.frac) * top + ty.frac * bottom + 0.5);
        if (wide) {
          out.set_gray16(x, y, static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0)));
        } else {
          out.pixel(x, y)[c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& img, std::uint32_t new_width, std::uint32_t new_height) {
  return as_gray(resize_bilinear(to_raster(img), new_width, new_height));
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0 && sigma <= 10.0)) {
    throw Error(ErrorCode::InvalidArgument, "sigma must lie in (0, 10]");
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    taps[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += taps[i + radius];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  const auto taps = gaussian_kernel(sigma);
  const int radius = static_cast<int>(taps.size() / 2);
  const int w = static_cast<int>(img.width());
  const int h = static_cast<int>(img.height());

  std::vector<double> horizontal(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int sx = std::clamp(x + k, 0, w - 1);
        acc += taps[k + radius] * img.at(sx, y);
      }
      horizontal[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }

  GrayImage out(img.width(), img.height());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int sy = std::clamp(y + k, 0, h - 1);
        acc += taps[k + radius] * horizontal[static_cast<std::size_t>(sy) * w + x];
      }
      out.at(x, y) = round_to_u8(acc);
    }
  }
  return out;
}

GrayImage mirror_horizontal(const GrayImage& img) {
  GrayImage out(img.width(), img.height());
  for (std::uint32_t y = 0; y < img.height(); ++y)
    for (std::uint32_t x = 0; x < img.width(); ++x)
      out.at(img.width() - 1 - x, y) = img.at(x, y);
  return out;
}

GrayImage rotate90(const GrayImage& img) {
  GrayImage out(img.height(), img.width());
  for (std::uint32_t y = 0; y < img.height(); ++y)
    for (std::uint32_t x = 0; x < img.width(); ++x)
      out.at(img.height() - 1 - y, x) = img.at(x, y);
  return out;
}

}  // namespace atelier
