#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "atelier/control_maps.hpp"
#include "atelier/error.hpp"
#include "doctest.h"
#include "generators.hpp"
#include "oracles.hpp"

using namespace atelier;

namespace {

oracle::Gray to_oracle(const GrayImage& img) {
  return {static_cast<int>(img.width()), static_cast<int>(img.height()),
          std::vector<int>(img.data().begin(), img.data().end())};
}

GrayImage step_image(std::uint32_t w, std::uint32_t h, std::uint32_t step_col) {
  GrayImage img(w, h, 0);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = step_col; x < w; ++x) img.at(x, y) = 255;
  return img;
}

// Left four columns dark; right block bright (200) in the top rows and dim
// (60) in the bottom rows, so the lower half of the step is a weak edge.
GrayImage hysteresis_fixture(bool with_strong_part) {
  GrayImage img(9, 9, 0);
  for (std::uint32_t y = 0; y < 9; ++y)
    for (std::uint32_t x = 4; x < 9; ++x) img.at(x, y) = y >= 5 ? 60 : (with_strong_part ? 200 : 0);
  return img;
}

const CannySettings kFixtureSettings{20, 100, 0.5};

}  // namespace

TEST_CASE("sobel_gradients: constant image has zero magnitude") {
  const auto g = sobel_gradients(GrayImage(8, 8, 90));
  CHECK(std::all_of(g.magnitude.begin(), g.magnitude.end(), [](double m) { return m == 0.0; }));
}

TEST_CASE("sobel_gradients: vertical step gives 1020 at both step columns, direction 0") {
  const auto g = sobel_gradients(step_image(10, 6, 5));
  for (std::uint32_t y = 0; y < 6; ++y) {
    for (std::uint32_t x : {4u, 5u}) {
      CHECK(g.magnitude[y * 10 + x] == 1020.0);
      CHECK(g.direction[y * 10 + x] == 0.0);
    }
    CHECK(g.magnitude[y * 10 + 3] == 0.0);
    CHECK(g.magnitude[y * 10 + 6] == 0.0);
  }
}

TEST_CASE("sobel_gradients: transpose maps direction to pi/2 - direction (mod pi)") {
  std::mt19937 rng(17);
  const auto img = testgen::random_gray(rng, 12, 12);
  GrayImage t(12, 12);
  for (std::uint32_t y = 0; y < 12; ++y)
    for (std::uint32_t x = 0; x < 12; ++x) t.at(y, x) = img.at(x, y);
  const auto a = sobel_gradients(img);
  const auto b = sobel_gradients(t);
  for (std::uint32_t y = 0; y < 12; ++y) {
    for (std::uint32_t x = 0; x < 12; ++x) {
      const double ma = a.magnitude[y * 12 + x];
      CHECK(b.magnitude[x * 12 + y] == ma);
      if (ma == 0) continue;
      double diff = b.direction[x * 12 + y] - (std::numbers::pi / 2 - a.direction[y * 12 + x]);
      diff = std::remainder(diff, std::numbers::pi);
      CHECK(std::abs(diff) < 1e-9);
    }
  }
}

TEST_CASE("sobel_gradients: rejects images below 3x3") {
  CHECK_THROWS_AS(sobel_gradients(GrayImage(2, 5)), Error);
}

TEST_CASE("canny_edges: constant image has no edges") {
  const auto e = canny_edges(GrayImage(64, 64, 128), CannySettings{});
  CHECK(std::all_of(e.data().begin(), e.data().end(), [](auto v) { return v == 0; }));
}

TEST_CASE("canny_edges: vertical step yields one full-height column") {
  const auto img = step_image(32, 32, 16);
  const auto e = canny_edges(img, CannySettings{});
  int edge_columns = 0;
  for (std::uint32_t x = 0; x < 32; ++x) {
    int count = 0;
    for (std::uint32_t y = 0; y < 32; ++y) count += e.at(x, y) == 255;
    if (count == 0) continue;
    ++edge_columns;
    CHECK(count == 32);
    CHECK(std::abs(static_cast<int>(x) - 16) <= 1);
  }
  CHECK(edge_columns == 1);
  const auto ref = oracle::canny(to_oracle(img), 25, 50, 1.4);
  CHECK(std::vector<int>(e.data().begin(), e.data().end()) == ref.edges);
}

TEST_CASE("canny_edges: weak segment survives only when linked to a strong one") {
  const auto linked = hysteresis_fixture(true);
  const auto ref_linked = oracle::canny(to_oracle(linked), 20, 100, 0.5);
  const auto out_linked = canny_edges(linked, kFixtureSettings);
  CHECK(std::vector<int>(out_linked.data().begin(), out_linked.data().end()) == ref_linked.edges);

  // The lower rows of the step are weak in the oracle yet kept.
  int weak_kept = 0;
  for (std::uint32_t y = 6; y < 9; ++y)
    for (std::uint32_t x = 0; x < 9; ++x) {
      const std::size_t k = y * 9 + x;
      if (ref_linked.cls[k] == oracle::Cls::Weak && out_linked.data()[k] == 255) ++weak_kept;
    }
  CHECK(weak_kept >= 3);

  const auto isolated = hysteresis_fixture(false);
  const auto ref_isolated = oracle::canny(to_oracle(isolated), 20, 100, 0.5);
  CHECK(std::count(ref_isolated.cls.begin(), ref_isolated.cls.end(), oracle::Cls::Weak) > 0);
  CHECK(std::count(ref_isolated.cls.begin(), ref_isolated.cls.end(), oracle::Cls::Strong) == 0);
  const auto out_isolated = canny_edges(isolated, kFixtureSettings);
  CHECK(std::all_of(out_isolated.data().begin(), out_isolated.data().end(),
                    [](auto v) { return v == 0; }));
}

TEST_CASE("canny_edges: binary output matching the naive oracle on random images") {
  std::mt19937 rng(2024);
  const CannySettings variants[] = {{}, {30, 90, 1.0}, {10, 40, 0.8}};
  for (int t = 0; t < 30; ++t) {
    const auto img = t % 2 ? testgen::random_gray(rng, 32, 32) : testgen::random_blocks(rng, 32, 32);
    const auto& s = variants[t % 3];
    const auto out = canny_edges(img, s);
    CHECK(std::all_of(out.data().begin(), out.data().end(), [](auto v) { return v == 0 || v == 255; }));
    const auto ref = oracle::canny(to_oracle(img), s.low_threshold, s.high_threshold, s.sigma);
    CHECK(std::vector<int>(out.data().begin(), out.data().end()) == ref.edges);
  }
}

TEST_CASE("canny_edges: rejects invalid settings and tiny images") {
  CHECK_THROWS_AS(canny_edges(GrayImage(8, 8), CannySettings{0, 10, 1.0}), Error);
  CHECK_THROWS_AS(canny_edges(GrayImage(8, 8), CannySettings{50, 40, 1.0}), Error);
  CHECK_THROWS_AS(canny_edges(GrayImage(8, 8), CannySettings{50, 256, 1.0}), Error);
  CHECK_THROWS_AS(canny_edges(GrayImage(2, 8), CannySettings{}), Error);
}

TEST_CASE("normalize_depth: three-pixel fixture and degenerate range") {
  const DepthBuffer d(3, 1, {1.0, 2.0, 3.0});
  const auto g = normalize_depth(d, 0.0);
  CHECK(std::vector<std::uint8_t>(g.data().begin(), g.data().end()) ==
        std::vector<std::uint8_t>{255, 128, 0});

  const double bg = DepthBuffer::kBackground;
  const DepthBuffer flat(2, 2, {4.0, bg, 4.0, 4.0});
  const auto f = normalize_depth(flat, 0.02);
  CHECK(std::vector<std::uint8_t>(f.data().begin(), f.data().end()) ==
        std::vector<std::uint8_t>{255, 0, 255, 255});
}

TEST_CASE("normalize_depth: clipped ramp matches the scalar oracle") {
  std::vector<double> ramp(100);
  for (int i = 0; i < 100; ++i) ramp[i] = i + 1;
  const auto g = normalize_depth(DepthBuffer(100, 1, ramp), 0.02);
  const auto ref = oracle::depth_levels(ramp, 0.02);
  // p2 = 2.98 and p98 = 98.02 under linear interpolation
  CHECK(g.data()[0] == 255);
  CHECK(g.data()[1] == 255);
  CHECK(g.data()[98] == 0);
  CHECK(g.data()[99] == 0);
  for (int i = 0; i < 100; ++i) CHECK(g.data()[i] == ref[i]);
}

TEST_CASE("normalize_depth: errors") {
  const double bg = DepthBuffer::kBackground;
  CHECK_THROWS_AS(normalize_depth(DepthBuffer(2, 1, {bg, bg}), 0.0), Error);
  CHECK_THROWS_AS(normalize_depth(DepthBuffer(2, 1, {1.0, 2.0}), 0.5), Error);
  CHECK_THROWS_AS(DepthBuffer(2, 1, {0.0, 2.0}), Error);
}

TEST_CASE("depth_from_png16: linear decode with background sentinel") {
  RasterImage png(3, 1, Channels::Gray16);
  png.set_gray16(0, 0, 0);
  png.set_gray16(1, 0, 32767);
  png.set_gray16(2, 0, 65535);
  const auto d = depth_from_png16(png, 1.0, 3.0);
  CHECK(d.at(0, 0) == 1.0);
  CHECK(d.at(1, 0) == doctest::Approx(1.0 + 2.0 * 32767 / 65534.0));
  CHECK(std::isinf(d.at(2, 0)));
  CHECK_THROWS_AS(depth_from_png16(png, 3.0, 1.0), Error);
  CHECK_THROWS_AS(depth_from_png16(RasterImage(3, 1, Channels::Gray8), 1.0, 3.0), Error);
}

TEST_CASE("feather_mask: identity, constant and impulse cases") {
  std::mt19937 rng(8);
  const auto mask = testgen::random_gray(rng, 10, 10);
  CHECK(feather_mask({mask, 0}) == mask);

  const GrayImage full(16, 16, 255);
  CHECK(feather_mask({full, 5}) == full);

  GrayImage impulse(21, 21, 0);
  impulse.at(10, 10) = 255;
  const auto f = feather_mask({impulse, 3});
  CHECK(f.at(10, 10) == 41);  // sigma 1, same as the blur impulse oracle
  CHECK_THROWS_AS(feather_mask({impulse, -1}), Error);
}

TEST_CASE("composite: identity cases and midpoint") {
  std::mt19937 rng(9);
  const auto orig = testgen::random_raster(rng, 6, 5, Channels::Rgba8);
  const auto gen = testgen::random_raster(rng, 6, 5, Channels::Rgba8);
  CHECK(composite(orig, gen, GrayImage(6, 5, 0)) == orig);
  CHECK(composite(orig, gen, GrayImage(6, 5, 255)) == gen);

  const RasterImage black(1, 1, Channels::Rgba8, {0, 0, 0, 0});
  const RasterImage white(1, 1, Channels::Rgba8, {255, 255, 255, 255});
  const auto mid = composite(black, white, GrayImage(1, 1, 128));
  CHECK(mid.pixel(0, 0)[0] == 128);

  CHECK_THROWS_AS(composite(orig, gen, GrayImage(5, 5, 0)), Error);
}

TEST_CASE("build_control_set: flags, shapes and missing depth") {
  const RasterImage capture(16, 12, Channels::Rgba8,
                            std::vector<std::uint8_t>(16 * 12 * 4, 200));
  const auto edge_only = build_control_set(capture, nullptr, {}, {}, {true, false});
  REQUIRE(edge_only.edge.has_value());
  CHECK_FALSE(edge_only.depth.has_value());
  CHECK(std::all_of(edge_only.edge->data().begin(), edge_only.edge->data().end(),
                    [](auto v) { return v == 0; }));

  std::vector<double> depths(16 * 12);
  for (std::size_t i = 0; i < depths.size(); ++i) depths[i] = 1.0 + i;
  const DepthBuffer depth(16, 12, depths);
  const auto both = build_control_set(capture, &depth, {}, {}, {true, true});
  REQUIRE(both.edge.has_value());
  REQUIRE(both.depth.has_value());
  CHECK(both.depth->width() == 16);
  CHECK(both.depth->height() == 12);
  CHECK(both.edge->width() == 16);

  try {
    build_control_set(capture, nullptr, {}, {}, {false, true});
    FAIL("expected MissingDepth");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingDepth);
  }
}

TEST_CASE("canny_edges: quarter turn commutes with edge detection away from the border") {
  std::mt19937 rng(77);
  for (int t = 0; t < 10; ++t) {
    const auto img = t % 2 ? testgen::random_gray(rng, 32, 24) : testgen::random_blocks(rng, 32, 24);
    const auto a = canny_edges(rotate90(img), CannySettings{});
    const auto b = rotate90(canny_edges(img, CannySettings{}));
    for (std::uint32_t y = 2; y + 2 < a.height(); ++y)
      for (std::uint32_t x = 2; x + 2 < a.width(); ++x) CHECK(a.at(x, y) == b.at(x, y));
  }
}

TEST_CASE("normalize_depth: monotone with exact endpoints on random buffers") {
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> depth(0.1, 50.0);
  std::bernoulli_distribution background(0.2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> values(64);
    for (auto& v : values) v = background(rng) ? DepthBuffer::kBackground : depth(rng);
    values[0] = depth(rng);
    values[1] = values[0] + 1.0;
    const auto g = normalize_depth(DepthBuffer(8, 8, values), 0.0);
    bool saw0 = false, saw255 = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        CHECK(g.data()[i] == 0);
        continue;
      }
      saw0 |= g.data()[i] == 0;
      saw255 |= g.data()[i] == 255;
      for (std::size_t j = 0; j < values.size(); ++j)
        if (std::isfinite(values[j]) && values[i] <= values[j]) CHECK(g.data()[i] >= g.data()[j]);
    }
    CHECK(saw0);
    CHECK(saw255);
  }
}
