#include "atelier/dispatcher.hpp"

#include <iostream>
#include <random>

namespace atelier {

namespace {

// Serializes save+publish so the hub never sees revisions out of order.
std::mutex g_commit_mu;

constexpr int kMaxCasAttempts = 64;

std::int64_t random_seed() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  return static_cast<std::int64_t>(rng() & 0xFFFFFFFFull);
}

std::string control_ref(const std::string& job_id, ControlKind kind) {
  return "control:" + job_id + "/" + std::string(to_string(kind));
}

}  // namespace

std::optional<RenderJob> update_job(
    ProjectStore& store, EventHub& hub, const std::string& job_id,
    const std::function<std::optional<RenderJob>(const RenderJob&)>& change) {
  for (int attempt = 0; attempt < kMaxCasAttempts; ++attempt) {
    const JobRecord rec = store.load_job(job_id);
    std::optional<RenderJob> next = change(rec.job);
    if (!next) return std::nullopt;
    std::lock_guard lock(g_commit_mu);
    try {
      store.save_job(*next, rec.revision);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::RevisionConflict) continue;
      throw;
    }
    hub.publish(*next);
    return next;
  }
  throw Error(ErrorCode::RevisionConflict, "job " + job_id + " kept changing underneath the update");
}

RenderJob apply_event(ProjectStore& store, EventHub& hub, const std::string& job_id,
                      const JobEvent& ev) {
  return *update_job(store, hub, job_id,
                     [&](const RenderJob& job) -> std::optional<RenderJob> { return transition(job, ev); });
}

BackendRequest prepare_request(ProjectStore& store, const RenderJob& job, const CannySettings& canny,
                               const DepthSettings& depth_settings) {
  const StyleRegistry registry = store.load_style_registry();
  const GenerationParams p = validate_params(job.params, registry);
  const auto w = static_cast<std::uint32_t>(p.width);
  const auto h = static_cast<std::uint32_t>(p.height);
  auto fit = [&](const RasterImage& img) {
    return img.width() == w && img.height() == h ? img : resize_bilinear(img, w, h);
  };

  BackendRequest req;
  req.final_prompt = format_prompt_with_styles(p.prompt, p.styles, registry);
  req.negative_prompt = p.negative_prompt;
  req.seed = p.seed;
  req.steps = *p.steps;
  req.cfg_scale = *p.cfg_scale;
  req.sampler = *p.sampler;
  req.width = w;
  req.height = h;
  req.mode = p.mode;
  req.batch_size = *p.batch_size;
  req.denoising_strength = *p.denoising_strength;

  std::optional<RasterImage> capture;
  for (const auto& unit : p.control_units) {
    GrayImage map;
    if (unit.kind == ControlKind::Edge) {
      if (!capture) capture = fit(store.load_capture(job.capture_id));
      map = canny_edges(to_grayscale(*capture), canny);
    } else {
      const auto depth = store.load_capture_depth(job.capture_id);
      if (!depth) throw Error(ErrorCode::MissingDepth, "depth control requires a capture with depth");
      map = normalize_depth(*depth, depth_settings.clip_percentile);
      if (map.width() != w || map.height() != h) map = resize_bilinear(map, w, h);
    }
    store.put_control(job.id, unit.kind, map);
    req.control_images.push_back({unit.kind, std::move(map), unit.weight, unit.guidance_start,
                                  unit.guidance_end});
  }

  if (p.mode != GenerationMode::TextToImage) req.init_image = fit(store.load_image_ref(p.init_ref));
  if (p.mode == GenerationMode::Inpaint) {
    const auto ref = parse_image_ref(p.mask_ref);
    GrayImage mask = store.load_mask(ref ? ref->id : job.id);
    if (mask.width() != w || mask.height() != h) {
      throw Error(ErrorCode::DimensionMismatch, "stored mask size differs from the job size");
    }
    req.mask_alpha = feather_mask({std::move(mask), p.feather_radius});
  }
  req.validate();
  return req;
}

Dispatcher::Dispatcher(ProjectStore& store, Backend& backend, EventHub& hub, DispatcherConfig config)
    : store_(store), backend_(backend), hub_(hub), config_(config) {
  config_.canny.validate();
  config_.depth.validate();
  if (config_.workers < 1) throw Error(ErrorCode::InvalidArgument, "dispatcher needs at least one worker");
}

Dispatcher::~Dispatcher() { stop(); }

void Dispatcher::recover() {
  for (const auto& rec : store_.list_jobs()) {
    switch (rec.job.state) {
      case JobState::Queued:
        enqueue(rec.job.id);
        break;
      case JobState::Preprocessing:
      case JobState::Dispatched:
      case JobState::Sampling:
        store_.delete_results(rec.job.id);
        update_job(store_, hub_, rec.job.id, [](const RenderJob& j) -> std::optional<RenderJob> {
          if (is_terminal(j.state)) return std::nullopt;
          return transition(j, event::Fail{"interrupted by a service restart"});
        });
        break;
      default:
        break;
    }
  }
}

void Dispatcher::start() {
  std::lock_guard lock(mu_);
  if (!workers_.empty()) return;
  for (int i = 0; i < config_.workers; ++i)
    workers_.emplace_back([this](std::stop_token st) { worker_loop(st); });
}

void Dispatcher::stop() {
  std::vector<std::jthread> workers;
  {
    std::lock_guard lock(mu_);
    workers.swap(workers_);
    for (auto& [id, source] : running_) source.request_stop();
  }
  for (auto& w : workers) w.request_stop();
  cv_.notify_all();
  workers.clear();  // joins
}

void Dispatcher::enqueue(const std::string& job_id) {
  {
    std::lock_guard lock(mu_);
    queue_.push_back(job_id);
  }
  cv_.notify_one();
}

void Dispatcher::interrupt(const std::string& job_id) {
  std::lock_guard lock(mu_);
  if (const auto it = running_.find(job_id); it != running_.end()) it->second.request_stop();
}

std::size_t Dispatcher::queued() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

void Dispatcher::worker_loop(std::stop_token stop) {
  while (true) {
    std::string id;
    {
      std::unique_lock lock(mu_);
      if (!cv_.wait(lock, stop, [&] { return !queue_.empty(); })) return;
      id = std::move(queue_.front());
      queue_.pop_front();
    }
    try {
      run_job(id);
    } catch (const std::exception& e) {
      std::cerr << "atelier: job " << id << " left unfinished: " << e.what() << '\n';
    }
    std::lock_guard lock(mu_);
    running_.erase(id);
  }
}

void Dispatcher::run_job(const std::string& job_id) {
  const auto rec = store_.find_job(job_id);
  if (!rec || rec->job.state != JobState::Queued) return;

  std::stop_source stop;
  {
    std::lock_guard lock(mu_);
    running_[job_id] = stop;
  }
  auto fail = [&](const std::string& message) {
    store_.delete_results(job_id);
    update_job(store_, hub_, job_id, [&](const RenderJob& j) -> std::optional<RenderJob> {
      if (is_terminal(j.state)) return std::nullopt;  // canceled meanwhile
      return transition(j, event::Fail{message});
    });
  };

  try {
    const RenderJob preparing = apply_event(store_, hub_, job_id, event::StartPreprocess{});
    BackendRequest req = prepare_request(store_, preparing, config_.canny, config_.depth);

    const std::int64_t seed = random_seed();
    const RenderJob dispatched =
        *update_job(store_, hub_, job_id, [&](const RenderJob& j) -> std::optional<RenderJob> {
          RenderJob next = transition(j, event::Dispatch{seed});
          for (auto& u : next.params.control_units) u.image_ref = control_ref(job_id, u.kind);
          return next;
        });
    req.seed = dispatched.params.seed;

    std::unique_lock backend_lock(backend_mu_);
    if (stop.stop_requested()) throw Error(ErrorCode::Canceled, "canceled before sampling");
    apply_event(store_, hub_, job_id, event::SamplingStarted{});

    std::mutex progress_mu;
    auto last_save = std::chrono::steady_clock::now() - config_.progress_save_interval;
    const ProgressSink sink = [&](double fraction) {
      std::lock_guard lock(progress_mu);
      const auto now = std::chrono::steady_clock::now();
      if (now - last_save < config_.progress_save_interval && fraction < 1.0) return;
      last_save = now;
      const auto committed =
          update_job(store_, hub_, job_id, [&](const RenderJob& j) -> std::optional<RenderJob> {
            if (j.state != JobState::Sampling) return std::nullopt;
            RenderJob next = transition(j, event::Progress{fraction});
            if (next.progress == j.progress) return std::nullopt;
            return next;
          });
      if (!committed && is_terminal(store_.load_job(job_id).job.state)) stop.request_stop();
    };

    BackendResult result = backend_.generate(req, sink, stop.get_token());
    backend_lock.unlock();

    // Results land before Completed so a completed job always has its files.
    std::vector<std::string> refs;
    for (std::size_t i = 0; i < result.images.size(); ++i) {
      store_.put_result(job_id, i, result.images[i]);
      refs.push_back(result_ref(job_id, i));
    }
    const auto done = update_job(store_, hub_, job_id, [&](const RenderJob& j) -> std::optional<RenderJob> {
      if (j.state != JobState::Sampling) return std::nullopt;
      return transition(j, event::Complete{refs});
    });
    if (!done) store_.delete_results(job_id);
  } catch (const ValidationError& e) {
    fail(e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Canceled || e.code() == ErrorCode::InvalidTransition) {
      // Someone else moved the job to a terminal state; leave no results behind.
      store_.delete_results(job_id);
      const auto now = store_.find_job(job_id);
      if (now && !is_terminal(now->job.state)) fail(e.what());
    } else {
      fail(std::string(error_code_name(e.code())) + ": " + e.what());
    }
  } catch (const std::exception& e) {
    fail(std::string("internal error: ") + e.what());
  }
}

}  // namespace atelier
