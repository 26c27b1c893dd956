#include "atelier/client.hpp"

#include "httplib.h"

namespace atelier {

bool SseParser::feed(std::string_view chunk, const std::function<bool(const SseEvent&)>& on_event) {
  buffer_.append(chunk);
  std::size_t pos = 0;
  while (true) {
    const std::size_t nl = buffer_.find('\n', pos);
    if (nl == std::string::npos) break;
    std::string_view line(buffer_.data() + pos, nl - pos);
    pos = nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (line.empty()) {
      if (!current_.event.empty() || !current_.data.empty()) {
        if (current_.event.empty()) current_.event = "message";
        const SseEvent ev = std::move(current_);
        current_ = {};
        if (!on_event(ev)) {
          buffer_.erase(0, pos);
          return false;
        }
      }
      continue;
    }
    if (line.front() == ':') continue;  // comment / keepalive
    const std::size_t colon = line.find(':');
    const std::string_view field = line.substr(0, colon);
    std::string_view value = colon == std::string_view::npos ? std::string_view() : line.substr(colon + 1);
    if (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    if (field == "event") {
      current_.event = std::string(value);
    } else if (field == "data") {
      if (!current_.data.empty()) current_.data += '\n';
      current_.data += value;
    }
  }
  buffer_.erase(0, pos);
  return true;
}

nlohmann::json HttpReply::json() const {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::MalformedResponse, "response is not JSON");
  return j;
}

struct ApiClient::Impl {
  httplib::Client http;
  std::chrono::milliseconds timeout;

  Impl(const std::string& url, std::chrono::milliseconds t) : http(url), timeout(t) {
    const auto sec = static_cast<time_t>(t.count() / 1000);
    const auto usec = static_cast<time_t>((t.count() % 1000) * 1000);
    http.set_connection_timeout(sec, usec);
    http.set_read_timeout(sec, usec);
    http.set_write_timeout(sec, usec);
  }
};

namespace {

HttpReply to_reply(const httplib::Result& res, const std::string& url) {
  if (!res) {
    throw Error(ErrorCode::Unreachable, "cannot reach " + url + ": " + httplib::to_string(res.error()));
  }
  return HttpReply{res->status, res->body, res->get_header_value("Content-Type")};
}

}  // namespace

ApiClient::ApiClient(std::string base_url, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
  impl_ = std::make_unique<Impl>(base_url_, timeout);
  if (!impl_->http.is_valid()) throw Error(ErrorCode::InvalidArgument, "bad server url " + base_url_);
}

ApiClient::~ApiClient() = default;

HttpReply ApiClient::get(const std::string& path) { return to_reply(impl_->http.Get(path), base_url_); }

HttpReply ApiClient::post_json(const std::string& path, const nlohmann::json& body) {
  return to_reply(impl_->http.Post(path, body.dump(), "application/json"), base_url_);
}

HttpReply ApiClient::post_capture(std::span<const std::uint8_t> color_png,
                                  std::optional<std::span<const std::uint8_t>> depth_png,
                                  std::optional<double> near, std::optional<double> far) {
  auto str = [](std::span<const std::uint8_t> b) {
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
  };
  httplib::MultipartFormDataItems items;
  items.push_back({"color", str(color_png), "color.png", "image/png"});
  if (depth_png) items.push_back({"depth", str(*depth_png), "depth.png", "image/png"});
  if (near) items.push_back({"near", nlohmann::json(*near).dump(), "", ""});
  if (far) items.push_back({"far", nlohmann::json(*far).dump(), "", ""});
  return to_reply(impl_->http.Post("/api/v1/captures", items), base_url_);
}

int ApiClient::stream_events(const std::string& job_id,
                             const std::function<bool(const SseEvent&)>& on_event) {
  SseParser parser;
  bool stopped = false;
  httplib::Client sse(base_url_);
  // Streams stay open for the whole job; only the connect step is bounded.
  const auto sec = static_cast<time_t>(impl_->timeout.count() / 1000);
  sse.set_connection_timeout(sec, 0);
  sse.set_read_timeout(std::max<time_t>(sec, 60), 0);
  auto res = sse.Get("/api/v1/jobs/" + job_id + "/events",
                     [&](const char* data, std::size_t len) {
                       if (!parser.feed(std::string_view(data, len), on_event)) {
                         stopped = true;
                         return false;
                       }
                       return true;
                     });
  if (!res) {
    if (stopped && res.error() == httplib::Error::Canceled) return 200;
    throw Error(ErrorCode::Unreachable, "event stream from " + base_url_ + " failed: " +
                                            httplib::to_string(res.error()));
  }
  return res->status;
}

}  // namespace atelier
