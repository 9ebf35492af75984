#pragma once

// Synthetic skin scenes built with the forward model: chromophore
// concentrations -> E -> log-absorption -> reflectance -> sRGB.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "chromofit/chromophore.hpp"
#include "chromofit/pixelcore.hpp"

namespace chromofit::testing {

struct BlemishSpec {
  int channel = kChanM;
  double peak = 0.5;  // concentration increase at the centre
  double mx = 0.0;
  double my = 0.0;
  double sx = 8.0;
  double sy = 8.0;
  double theta = 0.0;
};

struct SceneSpec {
  int width = 128;
  int height = 128;
  Eigen::Vector3d skin{0.3, 1.7, 0.1};
  Eigen::Vector2d slope{0.0, 0.0};  // added to every channel's concentration, per pixel
  std::vector<BlemishSpec> blemishes;
  double noise = 0.0;  // std of concentration noise
  std::uint64_t seed = 1;
};

inline double blemish_value(const BlemishSpec& b, double x, double y) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = x - b.mx, dy = y - b.my;
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return b.peak * std::exp(-0.5 * (u * u / (b.sx * b.sx) + v * v / (b.sy * b.sy)));
}

inline PixelPatch scene_concentrations(const SceneSpec& spec) {
  PixelPatch c(spec.width, spec.height, Space::Chromophore);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise > 0.0 ? spec.noise : 1.0);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      for (int k = 0; k < 3; ++k) {
        double v = spec.skin(k) + spec.slope.x() * x + spec.slope.y() * y;
        for (const auto& b : spec.blemishes) {
          if (b.channel == k) v += blemish_value(b, x, y);
        }
        if (spec.noise > 0.0) v += noise(rng);
        c.at(k, x, y) = v;
      }
    }
  }
  return c;
}

inline RgbImage8 render_scene(const SceneSpec& spec, const MixingMatrix& e = default_mixing_matrix()) {
  const PixelPatch conc = scene_concentrations(spec);
  RgbImage8 img(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const Eigen::Vector3d a = e.matrix() * Eigen::Vector3d(conc.at(0, x, y), conc.at(1, x, y), conc.at(2, x, y));
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = encode_srgb8(std::exp(-std::max(a(c), 0.0)));
    }
  }
  return img;
}

inline RgbImage8 random_image(int w, int h, std::uint64_t seed) {
  RgbImage8 img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(d(rng));
  return img;
}

inline PixelPatch random_patch(int w, int h, Space space, double lo, double hi, std::uint64_t seed) {
  PixelPatch p(w, h, space);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& ch : p.channels) {
    for (auto& v : ch) v = d(rng);
  }
  return p;
}

/// Bytes outside roi equal between a and b.
inline bool outside_identical(const RgbImage8& a, const RgbImage8& b, const Roi& roi) {
  if (a.width != b.width || a.height != b.height) return false;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (x >= roi.x && x < roi.x + roi.w && y >= roi.y && y < roi.y + roi.h) continue;
      for (int c = 0; c < 3; ++c) {
        if (a.at(x, y, c) != b.at(x, y, c)) return false;
      }
    }
  }
  return a.alpha == b.alpha;
}

}  // namespace chromofit::testing
