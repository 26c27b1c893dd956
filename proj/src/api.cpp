#include "atelier/api.hpp"

#include <atomic>
#include <charconv>
#include <iostream>
#include <thread>

#include "atelier/encoding.hpp"
#include "httplib.h"

namespace atelier {

using nlohmann::json;

nlohmann::json ApiError::to_json() const {
  json fields = json::array();
  for (const auto& f : field_errors) fields.push_back({{"field", f.field}, {"message", f.message}});
  return json{{"status", status}, {"code", code}, {"message", message}, {"field_errors", fields}};
}

int http_status_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::MalformedPng:
    case ErrorCode::UnsupportedPng:
    case ErrorCode::UnsupportedChannels:
    case ErrorCode::ImageTooSmall:
    case ErrorCode::MissingDepthMeta:
    case ErrorCode::InvalidDepth:
      return 400;
    case ErrorCode::NotFound:
      return 404;
    case ErrorCode::InvalidTransition:
    case ErrorCode::ParentNotCompleted:
    case ErrorCode::RevisionConflict:
    case ErrorCode::Canceled:
      return 409;
    case ErrorCode::DimensionMismatch:
    case ErrorCode::NoGeometry:
    case ErrorCode::MissingDepth:
    case ErrorCode::ValidationFailed:
    case ErrorCode::UnknownStyle:
      return 422;
    case ErrorCode::BackendRejected:
    case ErrorCode::MalformedResponse:
      return 502;
    case ErrorCode::BackendUnavailable:
    case ErrorCode::Unreachable:
      return 503;
    case ErrorCode::Timeout:
      return 504;
    case ErrorCode::IoError:
    case ErrorCode::MalformedRegistry:
    case ErrorCode::DuplicateStyle:
      return 500;
  }
  return 500;
}

ApiError to_api_error(const Error& e) {
  ApiError out{http_status_for(e.code()), std::string(error_code_name(e.code())), e.what(), {}};
  if (const auto* v = dynamic_cast<const ValidationError*>(&e)) out.field_errors = v->fields();
  return out;
}

namespace {

constexpr const char* kJson = "application/json";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

void send_error(httplib::Response& res, const ApiError& err) {
  send_json(res, err.status, err.to_json());
}

ApiError api_error(int status, std::string code, std::string message,
                   std::vector<FieldError> fields = {}) {
  return ApiError{status, std::move(code), std::move(message), std::move(fields)};
}

/// Thrown inside handlers to produce a specific envelope.
struct ApiFailure {
  ApiError error;
};

json parse_body(const httplib::Request& req) {
  json body = json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) {
    throw ApiFailure{api_error(400, "invalid_json", "request body must be a JSON object")};
  }
  return body;
}

std::string job_url(const std::string& id) { return "/api/v1/jobs/" + id; }

json job_status(const JobRecord& rec) {
  json j = to_json(rec.job);
  j["revision"] = rec.revision;
  j["result_count"] = rec.job.result_refs.size();
  json urls = json::array();
  for (std::size_t i = 0; i < rec.job.result_refs.size(); ++i)
    urls.push_back(job_url(rec.job.id) + "/results/" + std::to_string(i));
  j["result_urls"] = urls;
  return j;
}

std::string sse_event(std::string_view name, const json& data) {
  return "event: " + std::string(name) + "\ndata: " + data.dump() + "\n\n";
}

json state_payload(const RenderJob& job) {
  return json{{"job_id", job.id},
              {"state", to_string(job.state)},
              {"progress", job.progress},
              {"result_count", job.result_refs.size()},
              {"error", job.error ? json(*job.error) : json(nullptr)}};
}

/// Masks arrive as gray or RGBA PNGs. Gray is used directly; for RGBA the
/// luma is scaled by alpha, so both white-on-black and white-on-transparent
/// exports work.
GrayImage mask_from_png(const RasterImage& img) {
  if (img.channels() != Channels::Rgba8) return as_gray(img);
  const GrayImage luma = to_grayscale(img);
  GrayImage out(img.width(), img.height());
  for (std::uint32_t y = 0; y < img.height(); ++y)
    for (std::uint32_t x = 0; x < img.width(); ++x)
      out.at(x, y) = static_cast<std::uint8_t>((luma.at(x, y) * img.pixel(x, y)[3] + 127) / 255);
  return out;
}

std::optional<double> parse_number(const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) return std::nullopt;
  return v;
}

}  // namespace

struct ApiService::Impl {
  ServiceConfig config;
  ProjectStore& store;
  Backend& backend;
  EventHub hub;
  Dispatcher dispatcher;
  httplib::Server server;
  std::thread thread;
  int bound_port = -1;
  std::atomic<bool> stopped{false};

  Impl(ServiceConfig cfg, ProjectStore& s, Backend& b)
      : config(std::move(cfg)),
        store(s),
        backend(b),
        dispatcher(s, b, hub, DispatcherConfig{config.workers, config.canny, config.depth}) {
    routes();
  }

  template <class F>
  httplib::Server::Handler guarded(F fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const ApiFailure& f) {
        send_error(res, f.error);
      } catch (const Error& e) {
        send_error(res, to_api_error(e));
      } catch (const json::exception& e) {
        send_error(res, api_error(400, "invalid_json", e.what()));
      } catch (const std::exception& e) {
        send_error(res, api_error(500, "internal_error", e.what()));
      }
    };
  }

  JobRecord load_job_or_404(const std::string& id) {
    auto rec = store.find_job(id);
    if (!rec) throw ApiFailure{api_error(404, "not_found", "job " + id + " not found")};
    return std::move(*rec);
  }

  void apply_cors(const httplib::Request& req, httplib::Response& res) const {
    if (config.cors_origins.empty()) return;
    const std::string origin = req.get_header_value("Origin");
    const bool any = std::find(config.cors_origins.begin(), config.cors_origins.end(), "*") !=
                     config.cors_origins.end();
    if (any) {
      res.set_header("Access-Control-Allow-Origin", origin.empty() ? "*" : origin);
    } else if (std::find(config.cors_origins.begin(), config.cors_origins.end(), origin) !=
               config.cors_origins.end()) {
      res.set_header("Access-Control-Allow-Origin", origin);
    } else {
      return;
    }
    res.set_header("Vary", "Origin");
  }

  void routes() {
    server.new_task_queue = [n = config.http_threads] {
      return new httplib::ThreadPool(static_cast<std::size_t>(n));
    };
    server.set_payload_max_length(std::size_t{256} << 20);

    server.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      apply_cors(req, res);
    });
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Max-Age", "600");
    });
    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string code = res.status == 404 ? "not_found" : "http_error";
      send_json(res, res.status, api_error(res.status, code, "no route for " + req.method + " " + req.path).to_json());
    });
    if (config.access_log) {
      server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
        std::cerr << req.method << ' ' << req.path << ' ' << res.status << '\n';
      });
    }

    server.Post("/api/v1/captures", guarded([this](const auto& req, auto& res) { post_capture(req, res); }));
    server.Post("/api/v1/jobs", guarded([this](const auto& req, auto& res) { post_job(req, res); }));
    server.Get("/api/v1/jobs", guarded([this](const auto& req, auto& res) { list_jobs(req, res); }));
    server.Get(R"(/api/v1/jobs/([A-Za-z0-9_-]+))", guarded([this](const auto& req, auto& res) {
                 send_json(res, 200, job_status(load_job_or_404(req.matches[1])));
               }));
    server.Get(R"(/api/v1/jobs/([A-Za-z0-9_-]+)/results/(\d+))",
               guarded([this](const auto& req, auto& res) { get_result(req, res); }));
    server.Post(R"(/api/v1/jobs/([A-Za-z0-9_-]+)/inpaint)",
                guarded([this](const auto& req, auto& res) { post_inpaint(req, res); }));
    server.Post(R"(/api/v1/jobs/([A-Za-z0-9_-]+)/cancel)",
                guarded([this](const auto& req, auto& res) { post_cancel(req, res); }));
    server.Get(R"(/api/v1/jobs/([A-Za-z0-9_-]+)/events)",
               guarded([this](const auto& req, auto& res) { get_events(req, res); }));
    server.Get("/api/v1/styles", guarded([this](const auto&, auto& res) {
                 json out = json::array();
                 const StyleRegistry registry = store.load_style_registry();
                 for (const auto& s : registry.entries()) out.push_back(to_json(s));
                 send_json(res, 200, out);
               }));
    server.Get("/api/v1/healthz", guarded([this](const auto&, auto& res) {
                 const bool ok = backend.healthy();
                 send_json(res, 200, {{"status", ok ? "ok" : "degraded"}, {"backend", backend.name()}});
               }));
  }

  void post_capture(const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data() || !req.has_file("color")) {
      throw ApiFailure{api_error(400, "invalid_argument", "expected multipart form data with a color part")};
    }
    auto bytes = [](const std::string& s) {
      return std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
    };
    const std::string color = req.get_file_value("color").content;
    std::optional<std::string> depth;
    if (req.has_file("depth")) depth = req.get_file_value("depth").content;

    std::optional<DepthMeta> meta;
    const bool has_near = req.has_file("near"), has_far = req.has_file("far");
    if (has_near && has_far) {
      const auto near = parse_number(req.get_file_value("near").content);
      const auto far = parse_number(req.get_file_value("far").content);
      if (!near || !far) throw ApiFailure{api_error(400, "invalid_argument", "near and far must be numbers")};
      meta = DepthMeta{*near, *far};
    }

    try {
      const std::string id = depth ? store.put_capture(bytes(color), bytes(*depth), meta)
                                   : store.put_capture(bytes(color));
      const CaptureInfo info = store.capture_info(id);
      res.set_header("Location", "/api/v1/captures/" + id);
      send_json(res, 201,
                {{"capture_id", id}, {"width", info.width}, {"height", info.height}, {"has_depth", info.has_depth}});
    } catch (const Error& e) {
      ApiError err = to_api_error(e);
      if (err.status < 500) err.status = 400;  // upload problems are all client errors
      throw ApiFailure{err};
    }
  }

  void post_job(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    if (!body.contains("capture_id") || !body["capture_id"].is_string()) {
      throw ApiFailure{api_error(422, "validation_failed", "capture_id is required",
                                 {{"capture_id", "capture_id is required"}})};
    }
    const std::string capture_id = body["capture_id"].get<std::string>();
    json params_json = body.contains("params") ? body["params"] : body;
    if (!body.contains("params")) params_json.erase("capture_id");

    GenerationParams params = params_from_json(params_json);
    if (!store.has_capture(capture_id)) {
      throw ApiFailure{api_error(404, "unknown_capture", "capture " + capture_id + " not found")};
    }
    if (params.mode == GenerationMode::ImageToImage && params.init_ref.empty()) {
      params.init_ref = capture_ref(capture_id);
    }
    params = validate_params(params, store.load_style_registry());
    check_image_refs(params);

    RenderJob job = make_job(capture_id, params);
    store.save_job(job, 0);
    hub.publish(job);
    dispatcher.enqueue(job.id);
    res.set_header("Location", job_url(job.id));
    send_json(res, 202, {{"job_id", job.id}, {"state", to_string(job.state)}});
  }

  void check_image_refs(const GenerationParams& p) {
    std::vector<FieldError> errs;
    if (p.mode == GenerationMode::ImageToImage) {
      const auto ref = parse_image_ref(p.init_ref);
      const bool exists = ref && (ref->kind == ImageRef::Kind::Capture ? store.has_capture(ref->id)
                                                                        : store.has_result(ref->id, ref->index));
      if (!exists) errs.push_back({"init_ref", "init_ref does not name a stored image"});
    }
    if (p.mode == GenerationMode::Inpaint) {
      errs.push_back({"mode", "inpaint jobs are created through /jobs/{id}/inpaint"});
    }
    if (!errs.empty()) throw ValidationError(std::move(errs));
  }

  void list_jobs(const httplib::Request& req, httplib::Response& res) {
    std::optional<JobState> filter;
    if (req.has_param("state")) {
      filter = job_state_from_string(req.get_param_value("state"));
      if (!filter) throw ApiFailure{api_error(400, "invalid_argument", "unknown state filter")};
    }
    json jobs = json::array();
    for (const auto& rec : store.list_jobs(filter)) jobs.push_back(job_status(rec));
    send_json(res, 200, {{"jobs", jobs}});
  }

  void get_result(const httplib::Request& req, httplib::Response& res) {
    const JobRecord rec = load_job_or_404(req.matches[1]);
    if (rec.job.state != JobState::Completed) {
      throw ApiFailure{api_error(409, "not_ready", "job is " + std::string(to_string(rec.job.state)))};
    }
    std::size_t index = 0;
    const std::string n = req.matches[2];
    const auto r = std::from_chars(n.data(), n.data() + n.size(), index);
    if (r.ec != std::errc() || index >= rec.job.result_refs.size()) {
      throw ApiFailure{api_error(404, "not_found", "result " + n + " does not exist")};
    }
    const auto png = store.result_png(rec.job.id, index);
    res.status = 200;
    res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
  }

  void post_inpaint(const httplib::Request& req, httplib::Response& res) {
    const JobRecord parent = load_job_or_404(req.matches[1]);
    const json body = parse_body(req);
    if (parent.job.state != JobState::Completed) {
      throw ApiFailure{api_error(409, "parent_not_completed",
                                 "job " + parent.job.id + " is " + std::string(to_string(parent.job.state)))};
    }

    std::vector<FieldError> errs;
    std::size_t index = 0;
    if (body.contains("result_index")) {
      if (!body["result_index"].is_number_unsigned()) {
        errs.push_back({"result_index", "result_index must be a non-negative integer"});
      } else {
        index = body["result_index"].get<std::size_t>();
        if (index >= parent.job.result_refs.size()) errs.push_back({"result_index", "result_index out of range"});
      }
    }
    int feather = 0;
    if (body.contains("feather_radius")) {
      if (!body["feather_radius"].is_number_integer()) {
        errs.push_back({"feather_radius", "feather_radius must be an integer"});
      } else {
        feather = body["feather_radius"].get<int>();
        if (feather < 0 || feather > 30) errs.push_back({"feather_radius", "feather_radius out of range"});
      }
    }
    std::string prompt;
    if (body.contains("prompt")) {
      if (body["prompt"].is_string()) {
        prompt = body["prompt"].get<std::string>();
      } else {
        errs.push_back({"prompt", "prompt must be a string"});
      }
    }
    std::optional<std::vector<std::uint8_t>> mask_bytes;
    if (!body.contains("mask") || !body["mask"].is_string()) {
      errs.push_back({"mask", "mask must be a base64 PNG string"});
    } else {
      std::string_view text = body["mask"].get_ref<const std::string&>();
      if (const auto pos = text.find("base64,"); text.starts_with("data:") && pos != std::string_view::npos)
        text.remove_prefix(pos + 7);
      mask_bytes = base64_decode(text);
      if (!mask_bytes) errs.push_back({"mask", "mask is not valid base64"});
    }
    InpaintOverrides overrides;
    if (body.contains("overrides")) {
      try {
        overrides = overrides_from_json(body["overrides"]);
      } catch (const ValidationError& e) {
        errs.insert(errs.end(), e.fields().begin(), e.fields().end());
      }
    }
    if (!errs.empty()) throw ValidationError(std::move(errs));

    const GrayImage mask = mask_from_png(decode_png(*mask_bytes));
    RenderJob child = derive_inpaint_job(parent.job, index, {mask, feather}, prompt, overrides);
    child.params = validate_params(child.params, store.load_style_registry());

    store.put_mask(child.id, mask);
    store.save_job(child, 0);
    hub.publish(child);
    dispatcher.enqueue(child.id);
    res.set_header("Location", job_url(child.id));
    send_json(res, 202, {{"job_id", child.id}, {"parent_job", parent.job.id}, {"state", to_string(child.state)}});
  }

  void post_cancel(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    load_job_or_404(id);
    const auto canceled = update_job(store, hub, id, [](const RenderJob& j) -> std::optional<RenderJob> {
      if (is_terminal(j.state)) {
        throw ApiFailure{api_error(409, "invalid_transition",
                                   "job is already " + std::string(to_string(j.state)))};
      }
      return transition(j, event::Cancel{});
    });
    dispatcher.interrupt(id);
    send_json(res, 200, job_status(store.load_job(id)));
    (void)canceled;
  }

  struct Stream {
    std::string job_id;
    EventHub::Cursor cursor;
    std::optional<RenderJob> initial;
    JobState last_state = JobState::Queued;
    double last_progress = 0.0;
    double pending_progress = -1.0;
    std::chrono::steady_clock::time_point last_progress_sent{};
    std::chrono::steady_clock::time_point last_write = std::chrono::steady_clock::now();
    bool finished = false;
  };

  void get_events(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto stream = std::make_shared<Stream>();
    stream->job_id = id;
    // Cursor first, then the snapshot: anything in between shows up twice
    // at worst, and duplicate states are filtered below.
    stream->cursor = hub.cursor(id);
    stream->initial = load_job_or_404(id).job;

    res.set_header("Cache-Control", "no-cache");
    res.set_header("X-Accel-Buffering", "no");
    res.set_chunked_content_provider(
        "text/event-stream", [this, stream](std::size_t, httplib::DataSink& sink) {
          return pump(*stream, sink);
        });
  }

  bool write(httplib::DataSink& sink, const std::string& chunk, Stream& s) {
    s.last_write = std::chrono::steady_clock::now();
    return sink.write(chunk.data(), chunk.size());
  }

  bool emit_state(Stream& s, const RenderJob& job, httplib::DataSink& sink) {
    if (s.pending_progress > s.last_progress && !is_terminal(job.state)) {
      // never drop the last progress value ahead of a state change
      if (!emit_progress(s, s.pending_progress, sink)) return false;
    }
    s.last_state = job.state;
    if (job.state == JobState::Completed) s.last_progress = 1.0;
    if (!write(sink, sse_event("state", state_payload(job)), s)) return false;
    if (is_terminal(job.state)) {
      s.finished = true;
      sink.done();
    }
    return true;
  }

  bool emit_progress(Stream& s, double value, httplib::DataSink& sink) {
    s.last_progress = value;
    s.pending_progress = -1.0;
    s.last_progress_sent = std::chrono::steady_clock::now();
    return write(sink, sse_event("progress", {{"job_id", s.job_id}, {"progress", value}}), s);
  }

  bool pump(Stream& s, httplib::DataSink& sink) {
    if (s.finished) return true;
    if (s.initial) {
      const RenderJob job = std::move(*s.initial);
      s.initial.reset();
      s.last_progress = job.progress;
      return emit_state(s, job, sink);
    }
    if (hub.is_shut_down() || !sink.is_writable()) return false;

    const auto now = std::chrono::steady_clock::now();
    auto wait = std::chrono::milliseconds(200);
    if (s.pending_progress > s.last_progress) {
      const auto due = s.last_progress_sent + config.progress_event_interval;
      wait = std::max(std::chrono::milliseconds(0),
                      std::min(wait, std::chrono::duration_cast<std::chrono::milliseconds>(due - now)));
    }
    const EventHub::Update up = hub.wait(s.job_id, s.cursor, wait);
    s.cursor = up.cursor;

    for (const auto& job : up.new_states) {
      if (job.state == s.last_state) continue;
      if (!emit_state(s, job, sink)) return false;
      if (s.finished) return true;
    }
    if (up.latest && up.latest->progress > s.last_progress && up.latest->state == JobState::Sampling) {
      s.pending_progress = std::max(s.pending_progress, up.latest->progress);
    }
    if (s.pending_progress > s.last_progress &&
        std::chrono::steady_clock::now() - s.last_progress_sent >= config.progress_event_interval) {
      if (!emit_progress(s, s.pending_progress, sink)) return false;
    }
    if (std::chrono::steady_clock::now() - s.last_write >= config.keepalive_interval) {
      if (!write(sink, ": keepalive\n\n", s)) return false;
    }
    return true;
  }
};

ApiService::ApiService(ServiceConfig config, ProjectStore& store, Backend& backend)
    : impl_(std::make_unique<Impl>(std::move(config), store, backend)) {}

ApiService::~ApiService() { stop(); }

int ApiService::bind() {
  if (impl_->bound_port >= 0) return impl_->bound_port;
  auto& cfg = impl_->config;
  // The library default adds SO_REUSEPORT, which would let a second instance
  // share the port instead of failing to bind.
  impl_->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  int port = -1;
  if (cfg.port == 0) {
    port = impl_->server.bind_to_any_port(cfg.host);
  } else if (impl_->server.bind_to_port(cfg.host, cfg.port)) {
    port = cfg.port;
  }
  if (port < 0) {
    throw Error(ErrorCode::IoError, "cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  }
  impl_->bound_port = port;
  return port;
}

void ApiService::run() {
  bind();
  impl_->dispatcher.recover();
  impl_->dispatcher.start();
  impl_->server.listen_after_bind();
}

void ApiService::start() {
  bind();
  impl_->thread = std::thread([this] { run(); });
  impl_->server.wait_until_ready();
}

void ApiService::stop() {
  if (!impl_ || impl_->stopped.exchange(true)) return;
  impl_->hub.shutdown();
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->dispatcher.stop();
}

int ApiService::port() const noexcept { return impl_->bound_port; }
std::string ApiService::url() const { return "http://" + impl_->config.host + ":" + std::to_string(port()); }
Dispatcher& ApiService::dispatcher() noexcept { return impl_->dispatcher; }
EventHub& ApiService::hub() noexcept { return impl_->hub; }

}  // namespace atelier
