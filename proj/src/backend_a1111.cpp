#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>

#include "atelier/backend.hpp"
#include "atelier/encoding.hpp"
#include "httplib.h"

namespace atelier {

using nlohmann::json;

namespace {

constexpr std::string_view kDataUriPrefix = "base64,";

std::string png_base64(const RasterImage& img) { return base64_encode(encode_png(img)); }
std::string png_base64(const GrayImage& img) { return png_base64(to_raster(img)); }

std::string webui_sampler_name(std::string_view id) {
  for (const auto& s : known_samplers())
    if (s.id == id) return std::string(s.webui);
  return std::string(id);
}

[[noreturn]] void malformed(const std::string& msg) {
  throw Error(ErrorCode::MalformedResponse, msg);
}

template <class Rep, class Period>
std::pair<time_t, time_t> split_timeout(std::chrono::duration<Rep, Period> d) {
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(d).count();
  return {static_cast<time_t>(us / 1000000), static_cast<time_t>(us % 1000000)};
}

void configure(httplib::Client& client, std::chrono::milliseconds timeout) {
  const auto [sec, usec] = split_timeout(timeout);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);
}

[[noreturn]] void throw_transport(httplib::Error err, const std::string& base_url) {
  const std::string detail = base_url + ": " + httplib::to_string(err);
  if (err == httplib::Error::Read) throw Error(ErrorCode::Timeout, "backend timed out: " + detail);
  throw Error(ErrorCode::BackendUnavailable, "backend unreachable: " + detail);
}

}  // namespace

std::string_view a1111_endpoint(GenerationMode mode) noexcept {
  return mode == GenerationMode::TextToImage ? "/sdapi/v1/txt2img" : "/sdapi/v1/img2img";
}

json a1111_build_payload(const BackendRequest& req, const A1111Options& options) {
  json p = json::object();
  p["prompt"] = req.final_prompt;
  p["negative_prompt"] = req.negative_prompt;
  p["seed"] = req.seed;
  p["steps"] = req.steps;
  p["cfg_scale"] = req.cfg_scale;
  p["sampler_name"] = webui_sampler_name(req.sampler);
  p["width"] = req.width;
  p["height"] = req.height;
  p["batch_size"] = req.batch_size;

  if (req.mode != GenerationMode::TextToImage && req.init_image) {
    p["init_images"] = json::array({png_base64(*req.init_image)});
    p["denoising_strength"] = req.denoising_strength;
  }
  if (req.mode == GenerationMode::Inpaint && req.mask_alpha) {
    p["mask"] = png_base64(*req.mask_alpha);
    p["inpainting_fill"] = 1;
    p["inpaint_full_res"] = false;
    // Our mask is already feathered; keep the server from blurring it again.
    p["mask_blur"] = 0;
  }
  if (!req.control_images.empty()) {
    json args = json::array();
    for (const auto& c : req.control_images) {
      args.push_back({
          {"input_image", png_base64(c.image)},
          {"module", "none"},
          {"model", c.kind == ControlKind::Edge ? options.edge_model : options.depth_model},
          {"weight", c.weight},
          {"guidance_start", c.guidance_start},
          {"guidance_end", c.guidance_end},
      });
    }
    p["alwayson_scripts"] = {{"controlnet", {{"args", std::move(args)}}}};
  }
  return p;
}

BackendResult a1111_parse_response(const json& body) {
  if (!body.is_object()) malformed("response is not an object");
  const auto it = body.find("images");
  if (it == body.end() || !it->is_array()) malformed("response has no images array");
  if (it->empty()) malformed("response has no images");

  BackendResult result;
  for (const auto& entry : *it) {
    if (!entry.is_string()) malformed("image entry is not a string");
    std::string_view text = entry.get_ref<const std::string&>();
    if (text.starts_with("data:")) {
      const auto pos = text.find(kDataUriPrefix);
      if (pos == std::string_view::npos) malformed("unsupported data URI");
      text.remove_prefix(pos + kDataUriPrefix.size());
    }
    const auto bytes = base64_decode(text);
    if (!bytes) malformed("image entry is not valid base64");
    result.images.push_back(to_rgba(decode_png(*bytes)));
  }

  if (const auto info = body.find("info"); info != body.end()) {
    result.info = info->is_string() ? info->get<std::string>() : info->dump();
  }
  return result;
}

BackendResult a1111_parse_response(std::string_view body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) malformed("response is not JSON");
  return a1111_parse_response(j);
}

double a1111_poll_progress(const std::string& base_url, std::chrono::milliseconds timeout) {
  httplib::Client client(base_url);
  if (!client.is_valid()) throw Error(ErrorCode::BackendUnavailable, "bad backend url " + base_url);
  configure(client, timeout);
  auto res = client.Get("/sdapi/v1/progress?skip_current_image=true");
  if (!res) throw Error(ErrorCode::BackendUnavailable, "progress poll failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw Error(ErrorCode::BackendUnavailable, "progress poll returned " + std::to_string(res->status));
  const json j = json::parse(res->body, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("progress") || !j["progress"].is_number())
    throw Error(ErrorCode::BackendUnavailable, "progress body lacks a numeric progress field");
  const double v = j["progress"].get<double>();
  if (std::isnan(v)) return 0.0;
  return std::clamp(v, 0.0, 1.0);
}

bool A1111Backend::healthy() {
  try {
    a1111_poll_progress(options_.base_url, std::min<std::chrono::milliseconds>(options_.timeout,
                                                                              std::chrono::seconds(2)));
    return true;
  } catch (const Error&) {
    return false;
  }
}

BackendResult A1111Backend::generate(const BackendRequest& req, const ProgressSink& progress,
                                     std::stop_token stop) {
  req.validate();
  httplib::Client client(options_.base_url);
  if (!client.is_valid())
    throw Error(ErrorCode::BackendUnavailable, "bad backend url " + options_.base_url);
  configure(client, options_.timeout);
  const std::string body = a1111_build_payload(req, options_).dump();

  // Poll progress while the blocking POST runs; it also forwards cancellation
  // to the server, which makes the POST return early.
  std::mutex mu;
  std::condition_variable_any cv;
  std::jthread poller([&, stop](std::stop_token own) {
    double last = 0.0;
    bool interrupted = false;
    while (!own.stop_requested()) {
      {
        std::unique_lock lock(mu);
        cv.wait_for(lock, own, options_.poll_interval, [&] { return stop.stop_requested() && !interrupted; });
      }
      if (own.stop_requested()) break;
      if (stop.stop_requested()) {
        if (!interrupted) {
          httplib::Client c(options_.base_url);
          configure(c, std::chrono::seconds(5));
          c.Post("/sdapi/v1/interrupt");
          interrupted = true;
        }
        continue;
      }
      try {
        const double v = std::min(a1111_poll_progress(options_.base_url, options_.poll_interval * 4),
                                  kMaxSamplingProgress);
        if (v > last) {
          last = v;
          if (progress) progress(v);
        }
      } catch (const Error&) {
        // Progress is advisory; the POST result decides success.
      }
    }
  });
  std::stop_callback wake(stop, [&] { cv.notify_all(); });

  auto res = client.Post(std::string(a1111_endpoint(req.mode)), body, "application/json");
  poller.request_stop();
  cv.notify_all();
  poller.join();

  if (stop.stop_requested()) throw Error(ErrorCode::Canceled, "generation canceled");
  if (!res) throw_transport(res.error(), options_.base_url);
  if (res->status != 200) {
    throw Error(ErrorCode::BackendRejected, "backend returned HTTP " + std::to_string(res->status) +
                                                ": " + res->body.substr(0, 500));
  }

  BackendResult result = a1111_parse_response(std::string_view(res->body));
  // ControlNet appends its detected maps after the generated images.
  if (result.images.size() < static_cast<std::size_t>(req.batch_size))
    malformed("backend returned fewer images than requested");
  result.images.resize(static_cast<std::size_t>(req.batch_size));
  for (const auto& img : result.images) {
    if (img.width() != req.width || img.height() != req.height)
      malformed("backend image size differs from request");
  }
  if (progress) progress(1.0);
  return result;
}

}  // namespace atelier
