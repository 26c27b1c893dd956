#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include "atelier/error.hpp"
#include "atelier/raster.hpp"

namespace atelier {

namespace {

constexpr std::array<std::uint8_t, 8> kSignature = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
constexpr int kCompressionLevel = 6;

[[noreturn]] void malformed(const std::string& why) {
  throw Error(ErrorCode::MalformedPng, "malformed PNG: " + why);
}

[[noreturn]] void unsupported(const std::string& why) {
  throw Error(ErrorCode::UnsupportedPng, "unsupported PNG: " + why);
}

std::uint32_t read_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char (&type)[5],
               std::span<const std::uint8_t> payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0L, out.data() + type_at, static_cast<uInt>(4 + payload.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

struct Header {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint8_t bit_depth = 0;
  std::uint8_t color_type = 0;
};

std::vector<std::uint8_t> inflate_exact(const std::vector<std::uint8_t>& compressed,
                                        std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) malformed("zlib init failed");
  zs.next_in = const_cast<Bytef*>(compressed.data());
  zs.avail_in = static_cast<uInt>(compressed.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) malformed("corrupt or truncated image data");
  if (produced != expected) malformed("image data size mismatch");
  return out;
}

std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a);
  const int pb = std::abs(p - b);
  const int pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

// In-place reconstruction; returns the unfiltered rows without filter bytes.
std::vector<std::uint8_t> unfilter(const std::vector<std::uint8_t>& raw, std::size_t rows,
                                   std::size_t row_bytes, std::size_t bpp) {
  std::vector<std::uint8_t> out(rows * row_bytes);
  for (std::size_t y = 0; y < rows; ++y) {
    const std::uint8_t filter = raw[y * (row_bytes + 1)];
    const std::uint8_t* src = &raw[y * (row_bytes + 1) + 1];
    std::uint8_t* dst = &out[y * row_bytes];
    const std::uint8_t* up = y > 0 ? &out[(y - 1) * row_bytes] : nullptr;
    for (std::size_t i = 0; i < row_bytes; ++i) {
      const int a = i >= bpp ? dst[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= bpp) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: malformed("unknown filter type " + std::to_string(filter));
      }
      dst[i] = static_cast<std::uint8_t>(v);
    }
  }
  return out;
}

}  // namespace

RasterImage decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSignature.size() ||
      !std::equal(kSignature.begin(), kSignature.end(), bytes.begin())) {
    malformed("bad signature");
  }

  Header hdr;
  bool seen_header = false;
  bool seen_end = false;
  std::vector<std::uint8_t> compressed;
  std::size_t pos = kSignature.size();

  while (!seen_end) {
    if (bytes.size() - pos < 12) malformed("truncated chunk");
    const std::uint32_t length = read_u32(&bytes[pos]);
    if (length > 0x7FFFFFFFu || bytes.size() - pos - 12 < length) malformed("truncated chunk");
    const std::uint8_t* type = &bytes[pos + 4];
    const std::uint8_t* payload = type + 4;
    const std::uint32_t stored_crc = read_u32(payload + length);
    if (crc32(0L, type, length + 4) != stored_crc) malformed("CRC mismatch");
    for (int i = 0; i < 4; ++i) {
      const auto ch = type[i];
      if (!((ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z'))) malformed("bad chunk type");
    }
    const std::string name(reinterpret_cast<const char*>(type), 4);
    pos += 12 + length;

    if (!seen_header) {
      if (name != "IHDR" || length != 13) malformed("IHDR must come first");
      hdr.width = read_u32(payload);
      hdr.height = read_u32(payload + 4);
      hdr.bit_depth = payload[8];
      hdr.color_type = payload[9];
      if (hdr.width == 0 || hdr.height == 0) malformed("zero dimension");
      if (payload[10] != 0 || payload[11] != 0) malformed("unknown compression or filter method");
      if (payload[12] == 1) unsupported("interlaced images");
      if (payload[12] > 1) malformed("unknown interlace method");
      const bool ok = (hdr.color_type == 0 && (hdr.bit_depth == 8 || hdr.bit_depth == 16)) ||
                      ((hdr.color_type == 2 || hdr.color_type == 6) && hdr.bit_depth == 8);
      if (!ok) {
        unsupported("color type " + std::to_string(hdr.color_type) + " at bit depth " +
                    std::to_string(hdr.bit_depth));
      }
      if (hdr.width > kMaxDimension || hdr.height > kMaxDimension) {
        unsupported("dimensions exceed " + std::to_string(kMaxDimension));
      }
      seen_header = true;
    } else if (name == "IDAT") {
      compressed.insert(compressed.end(), payload, payload + length);
    } else if (name == "IEND") {
      seen_end = true;
    } else if (name == "IHDR") {
      malformed("duplicate IHDR");
    } else if (name == "PLTE") {
      // Suggested palette for truecolor images; irrelevant here.
    } else if (name[0] >= 'A' && name[0] <= 'Z') {
      unsupported("critical chunk " + name);
    }
  }
  if (compressed.empty()) malformed("no image data");

  const std::size_t samples = hdr.color_type == 0 ? 1 : hdr.color_type == 2 ? 3 : 4;
  const std::size_t bpp = samples * (hdr.bit_depth / 8);
  const std::size_t row_bytes = hdr.width * bpp;
  const auto raw = inflate_exact(compressed, hdr.height * (row_bytes + 1));
  auto rows = unfilter(raw, hdr.height, row_bytes, bpp);

  switch (hdr.color_type) {
    case 0:
      return RasterImage(hdr.width, hdr.height,
                         hdr.bit_depth == 16 ? Channels::Gray16 : Channels::Gray8, std::move(rows));
    case 6:
      return RasterImage(hdr.width, hdr.height, Channels::Rgba8, std::move(rows));
    default: {
      std::vector<std::uint8_t> rgba(static_cast<std::size_t>(hdr.width) * hdr.height * 4);
      for (std::size_t i = 0, n = static_cast<std::size_t>(hdr.width) * hdr.height; i < n; ++i) {
        rgba[i * 4 + 0] = rows[i * 3 + 0];
        rgba[i * 4 + 1] = rows[i * 3 + 1];
        rgba[i * 4 + 2] = rows[i * 3 + 2];
        rgba[i * 4 + 3] = 255;
      }
      return RasterImage(hdr.width, hdr.height, Channels::Rgba8, std::move(rgba));
    }
  }
}

std::vector<std::uint8_t> encode_png(const RasterImage& img) {
  if (img.empty()) throw Error(ErrorCode::InvalidArgument, "cannot encode an empty image");

  std::uint8_t bit_depth = 8;
  std::uint8_t color_type = 0;
  switch (img.channels()) {
    case Channels::Gray8: break;
    case Channels::Gray16: bit_depth = 16; break;
    case Channels::Rgba8: color_type = 6; break;
  }

  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, img.width());
  put_u32(ihdr, img.height());
  ihdr.insert(ihdr.end(), {bit_depth, color_type, 0, 0, 0});

  const std::size_t stride = img.stride();
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height() * (stride + 1));
  const auto data = img.data();
  for (std::uint32_t y = 0; y < img.height(); ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), data.begin() + y * stride, data.begin() + (y + 1) * stride);
  }

  uLongf compressed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(compressed_size);
  if (compress2(compressed.data(), &compressed_size, raw.data(), static_cast<uLong>(raw.size()),
                kCompressionLevel) != Z_OK) {
    throw Error(ErrorCode::IoError, "zlib compression failed");
  }
  compressed.resize(compressed_size);

  std::vector<std::uint8_t> out(kSignature.begin(), kSignature.end());
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  return out;
}

}  // namespace atelier
