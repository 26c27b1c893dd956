#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include "atelier/error.hpp"
#include "json.hpp"

namespace atelier {

struct SseEvent {
  std::string event;
  std::string data;
};

/// Incremental text/event-stream parser; feed arbitrary chunks.
class SseParser {
 public:
  /// Calls `on_event` per complete event. Returns false as soon as the
  /// callback does.
  bool feed(std::string_view chunk, const std::function<bool(const SseEvent&)>& on_event);

 private:
  std::string buffer_;
  SseEvent current_;
};

struct HttpReply {
  int status = 0;
  std::string body;
  std::string content_type;

  nlohmann::json json() const;
};

/// Thin blocking client for the service API. Transport failures throw
/// Error(Unreachable); HTTP error statuses are returned, not thrown.
class ApiClient {
 public:
  explicit ApiClient(std::string base_url,
                     std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~ApiClient();

  HttpReply get(const std::string& path);
  HttpReply post_json(const std::string& path, const nlohmann::json& body);
  HttpReply post_capture(std::span<const std::uint8_t> color_png,
                         std::optional<std::span<const std::uint8_t>> depth_png = std::nullopt,
                         std::optional<double> near = std::nullopt,
                         std::optional<double> far = std::nullopt);

  /// Follows GET /api/v1/jobs/{id}/events until the stream ends or
  /// `on_event` returns false. Returns the HTTP status.
  int stream_events(const std::string& job_id, const std::function<bool(const SseEvent&)>& on_event);

  const std::string& base_url() const noexcept { return base_url_; }

 private:
  struct Impl;
  std::string base_url_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace atelier
