#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "atelier/backend.hpp"
#include "atelier/dispatcher.hpp"
#include "atelier/events.hpp"
#include "atelier/store.hpp"
#include "json.hpp"

namespace atelier {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int workers = 1;
  CannySettings canny;
  DepthSettings depth;
  /// Origins allowed by CORS; "*" allows any.
  std::vector<std::string> cors_origins = {"*"};
  std::chrono::milliseconds progress_event_interval{250};
  std::chrono::milliseconds keepalive_interval{15000};
  int http_threads = 32;
  bool access_log = false;
};

/// Error envelope returned by every failing endpoint.
struct ApiError {
  int status = 500;
  std::string code;
  std::string message;
  std::vector<FieldError> field_errors;

  nlohmann::json to_json() const;
};

int http_status_for(ErrorCode code) noexcept;
ApiError to_api_error(const Error& e);

/// REST + server-sent-events front end over a store, a backend and a
/// dispatcher.
class ApiService {
 public:
  ApiService(ServiceConfig config, ProjectStore& store, Backend& backend);
  ~ApiService();

  ApiService(const ApiService&) = delete;
  ApiService& operator=(const ApiService&) = delete;

  /// Binds the listening socket and returns the port. Throws IoError.
  int bind();
  /// Recovers stored jobs, starts the workers and serves until stop().
  void run();
  /// bind() if needed, then run() on a background thread; returns once the
  /// server accepts connections.
  void start();
  void stop();

  int port() const noexcept;
  std::string url() const;
  Dispatcher& dispatcher() noexcept;
  EventHub& hub() noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace atelier
