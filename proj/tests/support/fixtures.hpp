#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "atelier/backend.hpp"

namespace testfx {

inline std::string fixture_path(const std::string& name) {
  return std::string(ATELIER_FIXTURE_DIR) + "/" + name;
}

inline std::string read_fixture(const std::string& name) {
  std::ifstream in(fixture_path(name), std::ios::binary);
  if (!in) throw std::runtime_error("missing fixture " + name);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline atelier::RasterImage pattern_rgba(std::uint32_t w, std::uint32_t h) {
  atelier::RasterImage img(w, h, atelier::Channels::Rgba8);
  for (std::uint32_t y = 0; y < h; ++y) {
    for (std::uint32_t x = 0; x < w; ++x) {
      auto* p = img.pixel(x, y);
      p[0] = static_cast<std::uint8_t>(x * 32 % 256);
      p[1] = static_cast<std::uint8_t>(y * 32 % 256);
      p[2] = static_cast<std::uint8_t>((x + y) * 16 % 256);
      p[3] = 255;
    }
  }
  return img;
}

template <class F>
atelier::GrayImage gray_from(std::uint32_t w, std::uint32_t h, F fn) {
  atelier::GrayImage img(w, h);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) img.at(x, y) = static_cast<std::uint8_t>(fn(x, y));
  return img;
}

// The three canonical requests behind the frozen payload fixtures.

inline atelier::BackendRequest canonical_txt2img() {
  atelier::BackendRequest r;
  r.final_prompt = "a timber pavilion on a hill <lora:watercolor:0.8>";
  r.negative_prompt = "blurry, lowres";
  r.seed = 42;
  r.steps = 20;
  r.cfg_scale = 7.0;
  r.sampler = "euler_a";
  r.width = 512;
  r.height = 512;
  r.batch_size = 1;
  return r;
}

inline atelier::BackendRequest canonical_img2img() {
  atelier::BackendRequest r;
  r.final_prompt = "concrete facade, overcast";
  r.negative_prompt = "people";
  r.seed = 7;
  r.steps = 30;
  r.cfg_scale = 6.5;
  r.sampler = "dpmpp_2m";
  r.width = 8;
  r.height = 8;
  r.batch_size = 2;
  r.mode = atelier::GenerationMode::ImageToImage;
  r.init_image = pattern_rgba(8, 8);
  r.denoising_strength = 0.6;
  return r;
}

inline atelier::BackendRequest canonical_inpaint_controlnet() {
  using atelier::ControlKind;
  atelier::BackendRequest r;
  r.final_prompt = "glass atrium <lora:watercolor:0.8>";
  r.seed = 123456789;
  r.steps = 25;
  r.cfg_scale = 7.5;
  r.sampler = "ddim";
  r.width = 8;
  r.height = 8;
  r.batch_size = 1;
  r.mode = atelier::GenerationMode::Inpaint;
  r.init_image = pattern_rgba(8, 8);
  r.mask_alpha = gray_from(8, 8, [](auto x, auto) { return x < 4 ? 255 : 0; });
  r.denoising_strength = 0.75;
  r.control_images.push_back(
      {ControlKind::Edge, gray_from(8, 8, [](auto x, auto) { return x == 3 ? 255 : 0; }), 1.0, 0.0, 1.0});
  r.control_images.push_back(
      {ControlKind::Depth, gray_from(8, 8, [](auto x, auto) { return x * 30; }), 0.5, 0.1, 0.9});
  return r;
}

}  // namespace testfx
