#include "atelier/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "atelier/client.hpp"
#include "atelier/encoding.hpp"

namespace atelier {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void bad_config(const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); }

/// Reads keys from a JSON object, rejecting unknown ones so typos surface.
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad_config(where_ + " must be an object");
  }

  template <class T>
  void read(const char* key, T& target) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      target = j_.at(key).get<T>();
    } catch (const json::exception&) {
      bad_config(where_ + "." + key + " has the wrong type");
    }
  }

  const json* object(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
        bad_config("unknown config key " + where_ + "." + key);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

std::pair<std::string, int> parse_listen(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos || colon == 0) bad_config("listen must look like host:port");
  int port = -1;
  try {
    std::size_t used = 0;
    port = std::stoi(listen.substr(colon + 1), &used);
    if (used != listen.size() - colon - 1) port = -1;
  } catch (const std::exception&) {
  }
  if (port < 0 || port > 65535) bad_config("listen port must be 0-65535");
  return {listen.substr(0, colon), port};
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

/// Loads and decodes a PNG; any failure is an image error.
RasterImage read_png(const std::string& path, std::vector<std::uint8_t>* raw = nullptr) {
  auto bytes = read_file_bytes(path);
  RasterImage img = decode_png(bytes);
  if (raw) *raw = std::move(bytes);
  return img;
}

std::string default_config_path() {
  const char* env = std::getenv("ATELIER_CONFIG");
  return env ? env : "";
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string config;
  std::string backend;
  int port = -1;
  std::string host;
  std::string store;
  std::string a1111_url;
};

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  Config cfg;
  try {
    const std::string path = a.config.empty() ? default_config_path() : a.config;
    if (!path.empty()) cfg = load_config(path);
    if (!a.backend.empty()) {
      if (a.backend == "mock") {
        cfg.backend = BackendKind::Mock;
      } else if (a.backend == "a1111") {
        cfg.backend = BackendKind::A1111;
      } else {
        bad_config("backend must be mock or a1111");
      }
    }
    if (a.port >= 0) cfg.port = a.port;
    if (!a.host.empty()) cfg.host = a.host;
    if (!a.store.empty()) cfg.store_root = a.store;
    if (!a.a1111_url.empty()) cfg.a1111.base_url = a.a1111_url;
    cfg.validate();
  } catch (const Error& e) {
    err << "atelier serve: " << e.what() << '\n';
    return kExitBadArgs;
  }

  std::unique_ptr<ProjectStore> store;
  try {
    store = std::make_unique<ProjectStore>(cfg.store_root);
  } catch (const Error& e) {
    err << "atelier serve: " << e.what() << '\n';
    return kExitBadArgs;
  }

  std::unique_ptr<Backend> backend;
  if (cfg.backend == BackendKind::Mock) {
    backend = std::make_unique<MockBackend>(
        MockBackend::Options{std::chrono::milliseconds(cfg.mock_step_delay_ms)});
  } else {
    backend = std::make_unique<A1111Backend>(cfg.a1111);
  }

  ServiceConfig sc;
  sc.host = cfg.host;
  sc.port = cfg.port;
  sc.workers = cfg.workers;
  sc.canny = cfg.canny;
  sc.depth = cfg.depth;
  sc.cors_origins = cfg.cors_origins;

  // Block the shutdown signals before any thread starts so only sigwait
  // below sees them.
  sigset_t signals, previous;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, &previous);

  int code = kExitOk;
  {
    ApiService api(sc, *store, *backend);
    try {
      api.bind();
    } catch (const Error& e) {
      err << "atelier serve: " << e.what() << '\n';
      pthread_sigmask(SIG_SETMASK, &previous, nullptr);
      return kExitBindFailed;
    }
    api.start();
    out << "listening on " << api.url() << " (backend " << backend->name() << ", store "
        << fs::absolute(cfg.store_root).string() << ")" << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    err << "atelier serve: shutting down\n";
    api.stop();
  }
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
  return code;
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string config;
  std::string input;
  std::string depth;
  std::optional<double> near;
  std::optional<double> far;
  std::optional<int> low;
  std::optional<int> high;
  std::optional<double> sigma;
  std::optional<double> clip;
  std::string out_dir;
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
  CannySettings canny;
  DepthSettings depth_settings;
  try {
    if (!a.config.empty()) {
      const Config cfg = load_config(a.config);
      canny = cfg.canny;
      depth_settings = cfg.depth;
    }
    if (a.low) canny.low_threshold = *a.low;
    if (a.high) canny.high_threshold = *a.high;
    if (a.sigma) canny.sigma = *a.sigma;
    if (a.clip) depth_settings.clip_percentile = *a.clip;
    canny.validate();
    depth_settings.validate();
    if (!a.depth.empty() && (!a.near || !a.far)) bad_config("--depth requires --near and --far");
    if (a.depth.empty() && (a.near || a.far)) bad_config("--near/--far require --depth");
  } catch (const Error& e) {
    err << "atelier preprocess: " << e.what() << '\n';
    return kExitBadArgs;
  }

  ControlSet maps;
  try {
    const RasterImage color = read_png(a.input);
    std::optional<DepthBuffer> depth;
    if (!a.depth.empty()) depth = depth_from_png16(read_png(a.depth), *a.near, *a.far);
    maps = build_control_set(color, depth ? &*depth : nullptr, canny, depth_settings,
                             ControlFlags{true, depth.has_value()});
  } catch (const Error& e) {
    err << "atelier preprocess: " << e.what() << '\n';
    return kExitImageError;
  }
  const GrayImage& edges = *maps.edge;
  const std::optional<GrayImage>& depth_map = maps.depth;

  json outputs = json::array();
  try {
    fs::create_directories(a.out_dir);
    const fs::path edge_path = fs::path(a.out_dir) / "edge.png";
    write_file_bytes(edge_path, encode_png(to_raster(edges)));
    outputs.push_back(edge_path.string());
    if (depth_map) {
      const fs::path depth_path = fs::path(a.out_dir) / "depth.png";
      write_file_bytes(depth_path, encode_png(to_raster(*depth_map)));
      outputs.push_back(depth_path.string());
    }
  } catch (const std::exception& e) {
    err << "atelier preprocess: " << e.what() << '\n';
    return kExitFailure;
  }

  json report{{"canny", {{"low_threshold", canny.low_threshold},
                         {"high_threshold", canny.high_threshold},
                         {"sigma", canny.sigma}}},
              {"outputs", outputs}};
  if (depth_map) report["depth"] = {{"clip_percentile", depth_settings.clip_percentile}};
  out << report.dump() << std::endl;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SubmitArgs {
  std::string server = "http://127.0.0.1:8080";
  std::string capture;
  std::string prompt;
  std::string negative;
  std::int64_t seed = -1;
  std::optional<int> steps;
  std::optional<double> cfg;
  std::optional<std::string> sampler;
  std::optional<int> width;
  std::optional<int> height;
  std::optional<int> batch;
  std::optional<std::string> mode;
  std::optional<double> denoise;
  std::optional<double> edge_weight;
  std::optional<double> depth_weight;
  std::string depth;
  std::optional<double> near;
  std::optional<double> far;
  std::vector<std::string> styles;
  bool wait = false;
  std::string out_dir = ".";
  int timeout_s = 30;
};

std::string describe_failure(const HttpReply& r) {
  try {
    const json body = r.json();
    std::string msg = "HTTP " + std::to_string(r.status) + " " + body.value("code", "") + ": " +
                      body.value("message", "");
    if (body.contains("field_errors")) {
      for (const auto& f : body["field_errors"]) {
        msg += "\n  " + f.value("field", "") + ": " + f.value("message", "");
      }
    }
    return msg;
  } catch (const std::exception&) {
    return "HTTP " + std::to_string(r.status);
  }
}

json submit_params(const SubmitArgs& a) {
  json p{{"prompt", a.prompt}, {"negative_prompt", a.negative}, {"seed", a.seed}};
  if (a.steps) p["steps"] = *a.steps;
  if (a.cfg) p["cfg_scale"] = *a.cfg;
  if (a.sampler) p["sampler"] = *a.sampler;
  if (a.width) p["width"] = *a.width;
  if (a.height) p["height"] = *a.height;
  if (a.batch) p["batch_size"] = *a.batch;
  if (a.mode) p["mode"] = *a.mode;
  if (a.denoise) p["denoising_strength"] = *a.denoise;
  json units = json::array();
  if (a.edge_weight) units.push_back({{"kind", "edge"}, {"weight", *a.edge_weight}});
  if (a.depth_weight) units.push_back({{"kind", "depth"}, {"weight", *a.depth_weight}});
  if (!units.empty()) p["control_units"] = units;
  json styles = json::array();
  for (const auto& s : a.styles) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) {
      styles.push_back({{"name", s}});
    } else {
      try {
        styles.push_back({{"name", s.substr(0, colon)}, {"weight", std::stod(s.substr(colon + 1))}});
      } catch (const std::exception&) {
        bad_config("--style weight must be a number: " + s);
      }
    }
  }
  if (!styles.empty()) p["styles"] = styles;
  return p;
}

int cmd_submit(const SubmitArgs& a, std::ostream& out, std::ostream& err) {
  json params;
  try {
    if (!a.depth.empty() && (!a.near || !a.far)) bad_config("--depth requires --near and --far");
    params = submit_params(a);
  } catch (const Error& e) {
    err << "atelier submit: " << e.what() << '\n';
    return kExitBadArgs;
  }

  std::vector<std::uint8_t> color, depth;
  try {
    read_png(a.capture, &color);
    if (!a.depth.empty()) read_png(a.depth, &depth);
  } catch (const Error& e) {
    err << "atelier submit: " << e.what() << '\n';
    return kExitImageError;
  }

  try {
    ApiClient client(a.server, std::chrono::seconds(a.timeout_s));
    const HttpReply up = a.depth.empty() ? client.post_capture(color)
                                         : client.post_capture(color, depth, a.near, a.far);
    if (up.status != 201) {
      err << "atelier submit: capture rejected: " << describe_failure(up) << '\n';
      return kExitJobFailed;
    }
    const std::string capture_id = up.json().at("capture_id");

    const HttpReply posted = client.post_json("/api/v1/jobs", {{"capture_id", capture_id}, {"params", params}});
    if (posted.status != 202) {
      err << "atelier submit: job rejected: " << describe_failure(posted) << '\n';
      return kExitJobFailed;
    }
    const std::string job_id = posted.json().at("job_id");
    out << job_id << std::endl;
    if (!a.wait) return kExitOk;

    std::string final_state;
    client.stream_events(job_id, [&](const SseEvent& e) {
      if (e.event != "state") return true;
      const json d = json::parse(e.data, nullptr, false);
      if (d.is_discarded()) return true;
      const std::string state = d.value("state", "");
      if (state == "completed" || state == "failed" || state == "canceled") {
        final_state = state;
        return false;
      }
      return true;
    });

    const json job = client.get("/api/v1/jobs/" + job_id).json();
    if (final_state.empty()) final_state = job.value("state", "");
    if (final_state != "completed") {
      std::string reason = job.contains("error") && job["error"].is_string() ? job["error"].get<std::string>() : "";
      err << "atelier submit: job " << job_id << " " << final_state << (reason.empty() ? "" : ": " + reason) << '\n';
      return kExitJobFailed;
    }

    fs::create_directories(a.out_dir);
    for (const auto& url : job.at("result_urls")) {
      const HttpReply img = client.get(url.get<std::string>());
      if (img.status != 200) {
        err << "atelier submit: download failed: " << describe_failure(img) << '\n';
        return kExitJobFailed;
      }
      const std::string index = url.get<std::string>().substr(url.get<std::string>().rfind('/') + 1);
      const fs::path path = fs::path(a.out_dir) / (job_id + "_" + index + ".png");
      write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(img.body.data()), img.body.size()));
      out << path.string() << std::endl;
    }
    return kExitOk;
  } catch (const Error& e) {
    err << "atelier submit: " << e.what() << '\n';
    if (e.code() == ErrorCode::Unreachable) return kExitUnreachable;
    if (e.code() == ErrorCode::InvalidArgument) return kExitBadArgs;
    return kExitFailure;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void Config::validate() const {
  if (port < 0 || port > 65535) bad_config("port must be 0-65535");
  if (store_root.empty()) bad_config("store_root must not be empty");
  if (workers < 1 || workers > 64) bad_config("workers must be 1-64");
  if (backend == BackendKind::A1111 && a1111.base_url.empty())
    bad_config("backend a1111 requires a1111.base_url");
  if (a1111.timeout.count() <= 0) bad_config("a1111.timeout_ms must be positive");
  if (a1111.poll_interval.count() <= 0) bad_config("a1111.poll_interval_ms must be positive");
  if (mock_step_delay_ms < 0) bad_config("mock.step_delay_ms must not be negative");
  try {
    canny.validate();
    depth.validate();
  } catch (const Error& e) {
    bad_config(e.what());
  }
}

Config config_from_json(const json& j) {
  Config c;
  ConfigReader r(j, "config");
  std::string listen = c.host + ":" + std::to_string(c.port);
  r.read("listen", listen);
  std::tie(c.host, c.port) = parse_listen(listen);
  r.read("store_root", c.store_root);
  std::string backend = "mock";
  r.read("backend", backend);
  if (backend == "mock") {
    c.backend = BackendKind::Mock;
  } else if (backend == "a1111") {
    c.backend = BackendKind::A1111;
  } else {
    bad_config("config.backend must be \"mock\" or \"a1111\"");
  }
  r.read("workers", c.workers);
  r.read("cors_origins", c.cors_origins);

  if (const json* a = r.object("a1111")) {
    ConfigReader ar(*a, "config.a1111");
    std::int64_t poll = c.a1111.poll_interval.count(), timeout = c.a1111.timeout.count();
    ar.read("base_url", c.a1111.base_url);
    ar.read("poll_interval_ms", poll);
    ar.read("timeout_ms", timeout);
    ar.read("edge_model", c.a1111.edge_model);
    ar.read("depth_model", c.a1111.depth_model);
    ar.finish();
    c.a1111.poll_interval = std::chrono::milliseconds(poll);
    c.a1111.timeout = std::chrono::milliseconds(timeout);
  }
  if (const json* cn = r.object("canny")) {
    ConfigReader cr(*cn, "config.canny");
    cr.read("low_threshold", c.canny.low_threshold);
    cr.read("high_threshold", c.canny.high_threshold);
    cr.read("sigma", c.canny.sigma);
    cr.finish();
  }
  if (const json* d = r.object("depth")) {
    ConfigReader dr(*d, "config.depth");
    dr.read("clip_percentile", c.depth.clip_percentile);
    dr.finish();
  }
  if (const json* m = r.object("mock")) {
    ConfigReader mr(*m, "config.mock");
    mr.read("step_delay_ms", c.mock_step_delay_ms);
    mr.finish();
  }
  r.finish();
  return c;
}

json to_json(const Config& c) {
  return json{{"listen", c.host + ":" + std::to_string(c.port)},
              {"store_root", c.store_root},
              {"backend", c.backend == BackendKind::Mock ? "mock" : "a1111"},
              {"a1111",
               {{"base_url", c.a1111.base_url},
                {"poll_interval_ms", c.a1111.poll_interval.count()},
                {"timeout_ms", c.a1111.timeout.count()},
                {"edge_model", c.a1111.edge_model},
                {"depth_model", c.a1111.depth_model}}},
              {"workers", c.workers},
              {"canny",
               {{"low_threshold", c.canny.low_threshold},
                {"high_threshold", c.canny.high_threshold},
                {"sigma", c.canny.sigma}}},
              {"depth", {{"clip_percentile", c.depth.clip_percentile}}},
              {"cors_origins", c.cors_origins},
              {"mock", {{"step_delay_ms", c.mock_step_delay_ms}}}};
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) bad_config("cannot open config file " + path);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) bad_config("config file " + path + " is not valid JSON");
  Config c = config_from_json(j);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Render-service for CAD viewport captures: control maps, diffusion jobs, live progress."};
  app.name("atelier");
  app.require_subcommand(1);

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "Run the HTTP service");
  s->add_option("--config", serve.config, "JSON config file (default: $ATELIER_CONFIG)");
  s->add_option("--backend", serve.backend, "mock or a1111")->check(CLI::IsMember({"mock", "a1111"}));
  s->add_option("--port", serve.port, "Listen port (overrides config)")->check(CLI::Range(0, 65535));
  s->add_option("--host", serve.host, "Listen address (overrides config)");
  s->add_option("--store", serve.store, "Project store directory (overrides config)");
  s->add_option("--a1111-url", serve.a1111_url, "webui base URL (overrides config)");

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Write edge (and depth) control maps for a capture");
  p->add_option("--config", pre.config, "JSON config supplying default Canny settings");
  p->add_option("--input", pre.input, "Color capture PNG")->required();
  p->add_option("--depth", pre.depth, "16-bit depth PNG");
  p->add_option("--near", pre.near, "Depth at code 0");
  p->add_option("--far", pre.far, "Depth at code 65534");
  p->add_option("--low", pre.low, "Canny low threshold (Sobel magnitude / 4)");
  p->add_option("--high", pre.high, "Canny high threshold (Sobel magnitude / 4)");
  p->add_option("--sigma", pre.sigma, "Gaussian blur sigma");
  p->add_option("--clip", pre.clip, "Depth clip percentile");
  p->add_option("--out-dir", pre.out_dir, "Output directory")->required();

  SubmitArgs sub;
  auto* j = app.add_subcommand("submit", "Upload a capture and queue a generation job");
  j->add_option("--server", sub.server, "Service base URL")->capture_default_str();
  j->add_option("--capture", sub.capture, "Color capture PNG")->required();
  j->add_option("--prompt", sub.prompt, "Prompt text")->required();
  j->add_option("--negative", sub.negative, "Negative prompt");
  j->add_option("--seed", sub.seed, "Seed, -1 for random")->capture_default_str();
  j->add_option("--steps", sub.steps, "Sampling steps");
  j->add_option("--cfg", sub.cfg, "CFG scale");
  j->add_option("--sampler", sub.sampler, "Sampler id");
  j->add_option("--width", sub.width, "Output width");
  j->add_option("--height", sub.height, "Output height");
  j->add_option("--batch", sub.batch, "Batch size");
  j->add_option("--mode", sub.mode, "txt2img or img2img");
  j->add_option("--denoise", sub.denoise, "Denoising strength for img2img");
  j->add_option("--edge", sub.edge_weight, "Add an edge control unit with this weight");
  j->add_option("--depth-control", sub.depth_weight, "Add a depth control unit with this weight");
  j->add_option("--depth", sub.depth, "16-bit depth PNG uploaded with the capture");
  j->add_option("--near", sub.near, "Depth at code 0");
  j->add_option("--far", sub.far, "Depth at code 65534");
  j->add_option("--style", sub.styles, "Style NAME or NAME:WEIGHT (repeatable)");
  j->add_flag("--wait", sub.wait, "Follow progress and download results");
  j->add_option("--out-dir", sub.out_dir, "Where --wait writes results")->capture_default_str();
  j->add_option("--timeout", sub.timeout_s, "Connect/request timeout in seconds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "atelier: " << e.what() << '\n';
    if (auto* sc = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front())
      err << sc->help();
    return kExitBadArgs;
  }

  try {
    if (s->parsed()) return cmd_serve(serve, out, err);
    if (p->parsed()) return cmd_preprocess(pre, out, err);
    if (j->parsed()) return cmd_submit(sub, out, err);
  } catch (const std::exception& e) {
    err << "atelier: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitBadArgs;
}

}  // namespace atelier
