#pragma once

#include <atomic>
#include <chrono>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "atelier/backend.hpp"
#include "atelier/encoding.hpp"
#include "httplib.h"
#include "json.hpp"

namespace testfx {

/// In-process stand-in for the webui HTTP API. By default it synthesizes a
/// response shaped like the real server's (generated images followed by one
/// map per ControlNet unit); `recorded_body` replays a captured response.
class FakeWebui {
 public:
  std::optional<std::string> recorded_body;
  int status = 200;
  std::chrono::milliseconds generate_delay{0};
  std::vector<double> progress_script{0.1, 0.4, 0.4, 0.3, 0.8, 1.7};

  FakeWebui() {
    server_.Post("/sdapi/v1/txt2img", [this](const auto& req, auto& res) { generate(req, res); });
    server_.Post("/sdapi/v1/img2img", [this](const auto& req, auto& res) { generate(req, res); });
    server_.Get("/sdapi/v1/progress", [this](const auto&, auto& res) {
      std::lock_guard lock(mu_);
      const double v = progress_script.empty()
                           ? 0.0
                           : progress_script[std::min(poll_count_, progress_script.size() - 1)];
      ++poll_count_;
      res.set_content(nlohmann::json{{"progress", v}, {"eta_relative", 1.0}}.dump(),
                      "application/json");
    });
    server_.Post("/sdapi/v1/interrupt", [this](const auto&, auto& res) {
      interrupted_ = true;
      res.set_content("{}", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeWebui() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::vector<std::pair<std::string, std::string>> requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }
  std::size_t polls() const {
    std::lock_guard lock(mu_);
    return poll_count_;
  }
  bool interrupted() const { return interrupted_; }

 private:
  void generate(const httplib::Request& req, httplib::Response& res) {
    {
      std::lock_guard lock(mu_);
      requests_.emplace_back(req.path, req.body);
    }
    const auto deadline = std::chrono::steady_clock::now() + generate_delay;
    while (std::chrono::steady_clock::now() < deadline && !interrupted_)
      std::this_thread::sleep_for(std::chrono::milliseconds(5));

    if (status != 200) {
      res.status = status;
      res.set_content(R"({"error":"bad request"})", "application/json");
      return;
    }
    if (recorded_body) {
      res.set_content(*recorded_body, "application/json");
      return;
    }
    const auto body = nlohmann::json::parse(req.body);
    const auto w = body.at("width").get<std::uint32_t>();
    const auto h = body.at("height").get<std::uint32_t>();
    const int batch = body.at("batch_size").get<int>();
    std::size_t maps = 0;
    if (body.contains("alwayson_scripts"))
      maps = body["alwayson_scripts"]["controlnet"]["args"].size();

    nlohmann::json images = nlohmann::json::array();
    for (int i = 0; i < batch; ++i) {
      atelier::RasterImage img(w, h, atelier::Channels::Rgba8);
      for (auto& b : img.data()) b = static_cast<std::uint8_t>(40 * (i + 1));
      images.push_back("data:image/png;base64," + atelier::base64_encode(atelier::encode_png(img)));
    }
    for (std::size_t i = 0; i < maps; ++i) {
      atelier::RasterImage map(w / 2 + 1, h / 2 + 1, atelier::Channels::Gray8);
      images.push_back(atelier::base64_encode(atelier::encode_png(map)));
    }
    res.set_content(nlohmann::json{{"images", images}, {"info", "{\"fake\": true}"}}.dump(),
                    "application/json");
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  std::vector<std::pair<std::string, std::string>> requests_;
  std::size_t poll_count_ = 0;
  std::atomic<bool> interrupted_{false};
};

/// A port with nothing listening on it.
inline int closed_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace testfx
