#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace atelier {

/// Standard alphabet with '=' padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Strict decode: rejects bad characters, bad padding and bad lengths.
std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text);

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace atelier
