// Release gate. One line per criterion; the exit status is nonzero if any
// line reads FAIL. Runs with the mock backend only.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "atelier/backend.hpp"
#include "atelier/control_maps.hpp"
#include "atelier/encoding.hpp"
#include "atelier/job_model.hpp"
#include "atelier/store.hpp"
#include "fake_webui.hpp"
#include "fixtures.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "service_harness.hpp"

using namespace atelier;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

/// Records the first mismatch; later ones only bump the count.
class Tally {
 public:
  void expect(bool cond, const std::string& what) {
    ++checks_;
    if (cond) return;
    if (failures_++ == 0) first_ = what;
  }
  Outcome outcome(const std::string& summary) const {
    if (failures_ == 0) return {true, summary};
    return {false, std::to_string(failures_) + "/" + std::to_string(checks_) + " checks failed, first: " + first_};
  }

 private:
  long checks_ = 0;
  long failures_ = 0;
  std::string first_;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt_seconds(double s) {
  std::ostringstream o;
  o.precision(3);
  o << std::fixed << s << " s";
  return o.str();
}

oracle::Gray to_oracle(const GrayImage& img) {
  return {static_cast<int>(img.width()), static_cast<int>(img.height()),
          std::vector<int>(img.data().begin(), img.data().end())};
}

std::vector<int> as_ints(const GrayImage& img) { return {img.data().begin(), img.data().end()}; }

// ---------------------------------------------------------------------------

Outcome canny_matches_reference() {
  Tally t;
  const auto start = Clock::now();
  std::mt19937 rng(50032);
  for (int i = 0; i < 50; ++i) {
    const GrayImage img = i % 2 ? testgen::random_gray(rng, 32, 32) : testgen::random_blocks(rng, 32, 32);
    const CannySettings s{};
    const auto ref = oracle::canny(to_oracle(img), s.low_threshold, s.high_threshold, s.sigma);
    t.expect(as_ints(canny_edges(img, s)) == ref.edges, "random image " + std::to_string(i));
  }

  // Vertical step: one full-height edge column next to the step.
  GrayImage step(32, 32, 0);
  for (std::uint32_t y = 0; y < 32; ++y)
    for (std::uint32_t x = 16; x < 32; ++x) step.at(x, y) = 255;
  const auto step_edges = canny_edges(step, CannySettings{});
  t.expect(as_ints(step_edges) == oracle::canny(to_oracle(step), 25, 50, 1.4).edges, "step fixture");
  int columns = 0;
  for (std::uint32_t x = 0; x < 32; ++x) {
    int count = 0;
    for (std::uint32_t y = 0; y < 32; ++y) count += step_edges.at(x, y) == 255;
    if (count > 0) {
      ++columns;
      t.expect(count == 32 && (x == 15 || x == 16), "step edge placement");
    }
  }
  t.expect(columns == 1, "step edge is a single column");

  // Hysteresis: a weak run is kept only when it touches a strong one.
  const CannySettings hs{20, 100, 0.5};
  for (const bool linked : {true, false}) {
    GrayImage img(9, 9, 0);
    for (std::uint32_t y = 0; y < 9; ++y)
      for (std::uint32_t x = 4; x < 9; ++x) img.at(x, y) = y >= 5 ? 60 : (linked ? 200 : 0);
    const auto ref = oracle::canny(to_oracle(img), hs.low_threshold, hs.high_threshold, hs.sigma);
    const auto out = canny_edges(img, hs);
    t.expect(as_ints(out) == ref.edges, linked ? "linked hysteresis fixture" : "isolated hysteresis fixture");
    const bool any = std::any_of(out.data().begin(), out.data().end(), [](auto v) { return v != 0; });
    t.expect(any == linked, "hysteresis keeps only linked weak edges");
  }

  const double elapsed = seconds_since(start);
  t.expect(elapsed < 5.0, "runtime " + fmt_seconds(elapsed) + " exceeds 5 s");
  return t.outcome("50 random images + step and hysteresis fixtures in " + fmt_seconds(elapsed));
}

Outcome canny_rotation_equivariance() {
  Tally t;
  std::mt19937 rng(9020);
  for (int i = 0; i < 20; ++i) {
    const std::uint32_t w = 24 + rng() % 24, h = 24 + rng() % 24;
    const GrayImage img = i % 2 ? testgen::random_gray(rng, w, h) : testgen::random_blocks(rng, w, h);
    const auto a = canny_edges(rotate90(img), CannySettings{});
    const auto b = rotate90(canny_edges(img, CannySettings{}));
    bool same = a.width() == b.width() && a.height() == b.height();
    for (std::uint32_t y = 2; same && y + 2 < a.height(); ++y)
      for (std::uint32_t x = 2; x + 2 < a.width(); ++x) same &= a.at(x, y) == b.at(x, y);
    t.expect(same, "image " + std::to_string(i));
  }
  return t.outcome("20 random images, exact outside a 2-pixel border");
}

Outcome depth_normalization() {
  Tally t;
  const auto fixture = normalize_depth(DepthBuffer(3, 1, {1.0, 2.0, 3.0}), 0.0);
  t.expect(std::vector<std::uint8_t>(fixture.data().begin(), fixture.data().end()) ==
               std::vector<std::uint8_t>{255, 128, 0},
           "{1,2,3} fixture");

  std::mt19937 rng(1000);
  std::uniform_real_distribution<double> depth(0.05, 200.0);
  std::uniform_real_distribution<double> clip(0.0, 0.2);
  for (int i = 0; i < 1000; ++i) {
    const std::uint32_t w = 2 + rng() % 15, h = 1 + rng() % 15;
    const double bg_rate = (rng() % 4) * 0.1;
    std::bernoulli_distribution background(bg_rate);
    std::vector<double> values(static_cast<std::size_t>(w) * h);
    for (auto& v : values) v = background(rng) ? DepthBuffer::kBackground : depth(rng);
    values[0] = depth(rng);
    values[1] = values[0] + 0.5 + depth(rng);
    const double c = i % 2 ? 0.0 : clip(rng);
    const auto g = normalize_depth(DepthBuffer(w, h, values), c);
    const auto ref = oracle::depth_levels(values, c);

    bool monotone = true, endpoints_ok = true, background_ok = true, matches = true;
    bool saw0 = false, saw255 = false;
    for (std::size_t p = 0; p < values.size(); ++p) {
      matches &= g.data()[p] == ref[p];
      if (!std::isfinite(values[p])) {
        background_ok &= g.data()[p] == 0;
        continue;
      }
      saw0 |= g.data()[p] == 0;
      saw255 |= g.data()[p] == 255;
      for (std::size_t q = 0; q < values.size(); ++q)
        if (std::isfinite(values[q]) && values[p] <= values[q]) monotone &= g.data()[p] >= g.data()[q];
    }
    endpoints_ok = saw0 && saw255;
    const std::string tag = "buffer " + std::to_string(i);
    t.expect(monotone, tag + ": not monotone");
    t.expect(endpoints_ok, tag + ": endpoints 0 and 255 not both reached");
    t.expect(background_ok, tag + ": background not 0");
    t.expect(matches, tag + ": differs from reference mapping");
  }
  return t.outcome("1000 random buffers monotone with exact endpoints; {1,2,3} -> {255,128,0}");
}

Outcome inpaint_safety() {
  Tally t;
  std::mt19937 rng(100);
  int protected_pixels = 0;
  for (int i = 0; i < 100; ++i) {
    BackendRequest req;
    req.final_prompt = "inpaint " + std::to_string(i);
    req.seed = static_cast<std::int64_t>(rng() >> 1);
    req.steps = 1 + static_cast<int>(rng() % 30);
    req.width = 8 + rng() % 90;
    req.height = 8 + rng() % 90;
    req.mode = GenerationMode::Inpaint;
    req.batch_size = 1 + static_cast<int>(rng() % 3);
    req.denoising_strength = (rng() % 101) / 100.0;
    req.init_image = testgen::random_raster(rng, req.width, req.height, Channels::Rgba8);
    GrayImage mask = i % 3 == 0 ? testgen::random_gray(rng, req.width, req.height)
                                : testgen::random_blocks(rng, req.width, req.height);
    for (auto& v : mask.data()) v = v < 110 ? 0 : v;
    req.mask_alpha = feather_mask({mask, static_cast<int>(rng() % 6)});
    if (rng() % 2) {
      GrayImage edges = testgen::random_gray(rng, req.width, req.height);
      for (auto& v : edges.data()) v = v > 180 ? 255 : 0;
      req.control_images.push_back({ControlKind::Edge, edges, 1.0, 0.0, 1.0});
    }
    const auto images = mock_generate(req).images;
    t.expect(images.size() == static_cast<std::size_t>(req.batch_size), "batch size");
    for (std::size_t b = 0; b < images.size(); ++b) {
      bool safe = true;
      for (std::uint32_t y = 0; y < req.height; ++y)
        for (std::uint32_t x = 0; x < req.width; ++x) {
          if (req.mask_alpha->at(x, y) != 0) continue;
          if (b == 0) ++protected_pixels;
          safe &= std::equal(images[b].pixel(x, y), images[b].pixel(x, y) + 4, req.init_image->pixel(x, y));
        }
      t.expect(safe, "case " + std::to_string(i) + " image " + std::to_string(b));
    }
  }

  // The same property through the service: inpaint children of one parent.
  testfx::ServiceHarness h;
  const std::string cap = h.upload_scene(64, 64);
  const std::string parent = h.submit_ok(cap, {{"prompt", "stone house"}, {"seed", 5}, {"width", 64}, {"height", 64}});
  h.wait_terminal(parent);
  const RasterImage before = decode_png(h.store.result_png(parent, 0));
  for (int i = 0; i < 5; ++i) {
    GrayImage mask = testgen::random_blocks(rng, 64, 64);
    for (auto& v : mask.data()) v = v < 128 ? 0 : 255;
    const int radius = static_cast<int>(rng() % 5);
    const auto r = h.client->post_json("/api/v1/jobs/" + parent + "/inpaint",
                                       {{"result_index", 0},
                                        {"mask", base64_encode(encode_png(to_raster(mask)))},
                                        {"prompt", "ivy"},
                                        {"feather_radius", radius}});
    t.expect(r.status == 202, "service inpaint accepted");
    if (r.status != 202) continue;
    const std::string child = r.json()["job_id"];
    t.expect(h.wait_terminal(child)["state"] == "completed", "service inpaint completed");
    const RasterImage after = decode_png(h.store.result_png(child, 0));
    const GrayImage alpha = feather_mask({mask, radius});
    bool safe = true;
    for (std::uint32_t y = 0; y < 64; ++y)
      for (std::uint32_t x = 0; x < 64; ++x)
        if (alpha.at(x, y) == 0) safe &= std::equal(before.pixel(x, y), before.pixel(x, y) + 4, after.pixel(x, y));
    t.expect(safe, "service inpaint child " + std::to_string(i));
  }
  return t.outcome("100 random cases (" + std::to_string(protected_pixels) +
                   " alpha-0 pixels) plus 5 service inpaints bit-identical");
}

Outcome determinism() {
  Tally t;
  testfx::ServiceHarness h;
  const std::string cap = h.upload_scene(128, 96);
  const std::vector<json> param_sets = {
      {{"prompt", "glass pavilion at dusk"}, {"seed", 1234}, {"width", 128}, {"height", 96}},
      {{"prompt", "courtyard"}, {"seed", 99}, {"width", 64}, {"height", 64}, {"batch_size", 3},
       {"control_units", json::array({{{"kind", "edge"}, {"weight", 0.8}}})}},
      {{"prompt", "loft"}, {"seed", 7}, {"width", 128}, {"height", 96}, {"mode", "img2img"},
       {"denoising_strength", 0.4}, {"steps", 8}},
  };
  int compared = 0;
  for (const auto& params : param_sets) {
    const std::string a = h.submit_ok(cap, params);
    const std::string b = h.submit_ok(cap, params);
    const json ja = h.wait_terminal(a), jb = h.wait_terminal(b);
    t.expect(ja["state"] == "completed" && jb["state"] == "completed", "both jobs complete");
    t.expect(ja["result_count"] == jb["result_count"], "same result count");
    for (int i = 0; i < ja.value("result_count", 0); ++i) {
      const auto path = [&](const std::string& id) { return "/api/v1/jobs/" + id + "/results/" + std::to_string(i); };
      const auto ra = h.client->get(path(a)), rb = h.client->get(path(b));
      t.expect(ra.status == 200 && rb.status == 200, "result download");
      t.expect(!ra.body.empty() && ra.body == rb.body, "result " + std::to_string(i) + " bytes differ");
      ++compared;
    }
  }
  return t.outcome(std::to_string(compared) + " result PNGs byte-identical across repeated submissions");
}

Outcome state_machine() {
  Tally t;
  std::mt19937 rng(10000);
  std::uniform_real_distribution<double> frac(-0.3, 1.4);
  long applied = 0, rejected = 0;
  for (int seq = 0; seq < 10000; ++seq) {
    RenderJob job = make_job("cap", GenerationParams{}, 0);
    std::optional<JobState> terminal;
    double last = job.progress;
    const int length = 1 + static_cast<int>(rng() % 30);
    for (int step = 0; step < length; ++step) {
      // Half the draws follow the happy path so sequences reach deep states.
      unsigned pick = rng() % 7;
      if (rng() % 2) {
        switch (job.state) {
          case JobState::Queued: pick = 0; break;
          case JobState::Preprocessing: pick = 1; break;
          case JobState::Dispatched: pick = 2; break;
          case JobState::Sampling: pick = rng() % 4 ? 3 : 4; break;
          default: break;
        }
      }
      JobEvent ev;
      switch (pick) {
        case 0: ev = event::StartPreprocess{}; break;
        case 1: ev = event::Dispatch{static_cast<std::int64_t>(rng() % 1000)}; break;
        case 2: ev = event::SamplingStarted{}; break;
        case 3: ev = event::Progress{frac(rng)}; break;
        case 4: ev = event::Complete{{"result:x/0"}}; break;
        case 5: ev = event::Fail{"boom"}; break;
        default: ev = event::Cancel{}; break;
      }
      try {
        job = transition(job, ev, step + 1);
        ++applied;
      } catch (const Error& e) {
        ++rejected;
        t.expect(e.code() == ErrorCode::InvalidTransition, "unexpected error kind");
      }
      if (terminal) t.expect(job.state == *terminal, "left terminal state in sequence " + std::to_string(seq));
      if (is_terminal(job.state)) terminal = job.state;
      t.expect(job.progress >= last, "progress decreased in sequence " + std::to_string(seq));
      t.expect(job.progress >= 0.0 && job.progress <= 1.0, "progress out of [0,1]");
      last = job.progress;
    }
  }
  return t.outcome("10000 sequences (" + std::to_string(applied) + " applied, " + std::to_string(rejected) +
                   " rejected events)");
}

Outcome protocol_golden() {
  Tally t;
  t.expect(a1111_build_payload(testfx::canonical_txt2img()).dump() == testfx::read_fixture("a1111_txt2img.json"),
           "txt2img payload");
  t.expect(a1111_build_payload(testfx::canonical_img2img()).dump() == testfx::read_fixture("a1111_img2img.json"),
           "img2img payload");
  t.expect(a1111_build_payload(testfx::canonical_inpaint_controlnet()).dump() ==
               testfx::read_fixture("a1111_inpaint_controlnet.json"),
           "inpaint+controlnet payload");

  testfx::FakeWebui fake;
  fake.recorded_body = testfx::read_fixture("a1111_txt2img_response.json");
  fake.generate_delay = std::chrono::milliseconds(50);
  A1111Options opts;
  opts.base_url = fake.url();
  opts.poll_interval = std::chrono::milliseconds(5);
  A1111Backend backend(opts);
  BackendRequest req;
  req.final_prompt = "courtyard";
  req.seed = 42;
  req.steps = 4;
  req.width = 8;
  req.height = 8;
  req.batch_size = 2;
  std::vector<double> progress;
  try {
    const auto result = backend.generate(req, [&](double p) { progress.push_back(p); });
    t.expect(result.images.size() == 2, "recorded response yields the batch");
    t.expect(!progress.empty() && progress.back() == 1.0, "progress ends at 1");
    t.expect(std::is_sorted(progress.begin(), progress.end()), "progress monotone");
    const auto sent = fake.requests();
    t.expect(sent.size() == 1 && sent[0].second == a1111_build_payload(req).dump(), "request body on the wire");
  } catch (const std::exception& e) {
    t.expect(false, std::string("generate threw: ") + e.what());
  }
  return t.outcome("3 payloads byte-exact; recorded-response generate succeeded");
}

Outcome end_to_end_latency() {
  Tally t;
  testfx::ServiceHarness h;
  const std::vector<std::uint8_t> png = encode_png(testfx::ServiceHarness::scene(512, 512));
  std::vector<double> runs;
  for (int run = 0; run < 3; ++run) {
    const auto start = Clock::now();
    const auto up = h.client->post_capture(png);
    t.expect(up.status == 201, "capture upload");
    if (up.status != 201) break;
    const std::string cap = up.json()["capture_id"];
    const std::string job = h.submit_ok(cap, {{"prompt", "timber pavilion"}, {"seed", 3 + run},
                                              {"width", 512}, {"height", 512},
                                              {"control_units", json::array({{{"kind", "edge"}}})}});
    std::string final_state;
    h.client->stream_events(job, [&](const SseEvent& e) {
      if (e.event == "state") final_state = json::parse(e.data).value("state", "");
      return true;
    });
    t.expect(final_state == "completed", "stream ended in completed");
    const auto result = h.client->get("/api/v1/jobs/" + job + "/results/0");
    t.expect(result.status == 200 && result.content_type == "image/png", "result download");
    const double elapsed = seconds_since(start);
    runs.push_back(elapsed);
    t.expect(elapsed < 2.0, "run " + std::to_string(run) + " took " + fmt_seconds(elapsed));
  }
  const double worst = runs.empty() ? 0 : *std::max_element(runs.begin(), runs.end());
  return t.outcome("512x512 capture to downloaded result, worst of 3 runs " + fmt_seconds(worst));
}

Outcome crash_safety() {
  Tally t;
  testfx::TempDir dir;
  RasterImage color(16, 16, Channels::Rgba8);
  std::string cap;
  {
    ProjectStore store(dir.path());
    cap = store.put_capture(encode_png(color));
  }
  struct Crash {};
  const JobEvent steps[] = {event::StartPreprocess{}, event::Dispatch{17}, event::SamplingStarted{},
                            event::Progress{0.4}, event::Complete{{"result:x/0"}}};
  RenderJob job = make_job(cap, GenerationParams{}, 1);
  std::int64_t revision = 0;
  {
    ProjectStore store(dir.path());
    revision = store.save_job(job, 0);
  }
  Timestamp now = 2;
  for (const auto& ev : steps) {
    const RenderJob next = transition(job, ev, now++);
    {
      ProjectStore store(dir.path());
      store.set_before_rename_hook([](const std::filesystem::path&) { throw Crash{}; });
      bool crashed = false;
      try {
        store.save_job(next, revision);
      } catch (const Crash&) {
        crashed = true;
      }
      t.expect(crashed, "hook fired");
    }
    // A fresh view, as after a restart, must see the previous version intact.
    ProjectStore fresh(dir.path());
    const auto rec = fresh.find_job(job.id);
    t.expect(rec.has_value(), std::string("job unreadable after crash during ") + std::string(event_name(ev)));
    if (!rec) break;
    t.expect(rec->revision == revision && rec->job == job,
             std::string("job changed by a crashed write during ") + std::string(event_name(ev)));
    t.expect(fresh.list_jobs().size() == 1, "listing sees exactly one job");
    revision = fresh.save_job(next, revision);
    job = next;
  }
  return t.outcome("5 injected crashes between temp write and rename; prior job JSON intact each time");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"canny matches the reference implementation", canny_matches_reference},
      {"canny commutes with quarter-turn rotation", canny_rotation_equivariance},
      {"depth normalization monotone with exact endpoints", depth_normalization},
      {"inpaint leaves alpha-0 pixels untouched", inpaint_safety},
      {"identical jobs give identical PNGs through the API", determinism},
      {"job state machine property", state_machine},
      {"webui protocol golden fixtures", protocol_golden},
      {"end-to-end 512x512 under 2 s", end_to_end_latency},
      {"crash between temp write and rename", crash_safety},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.ok;
    std::cout << (o.ok ? "[PASS] " : "[FAIL] ") << name << " -- " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
