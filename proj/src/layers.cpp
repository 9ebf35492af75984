#include "chromofit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "chromofit/errors.hpp"

namespace chromofit {

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ParameterError("blur sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

PixelPatch gaussian_blur(const PixelPatch& p, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int w = p.width;
  const int h = p.height;

  // Border index tables, so the inner loops are branch-free.
  std::vector<int> xi(w + 2 * r);
  std::vector<int> yi(h + 2 * r);
  for (int i = 0; i < w + 2 * r; ++i) xi[i] = reflect101(i - r, w);
  for (int i = 0; i < h + 2 * r; ++i) yi[i] = reflect101(i - r, h);

  PixelPatch out = p.like();
  std::vector<double> tmp(p.size());
  for (int c = 0; c < 3; ++c) {
    const auto& src = p.channels[c];
    for (int y = 0; y < h; ++y) {
      const double* row = &src[static_cast<std::size_t>(y) * w];
      double* dst = &tmp[static_cast<std::size_t>(y) * w];
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int j = 0; j <= 2 * r; ++j) acc += k[j] * row[xi[x + j]];
        dst[x] = acc;
      }
    }
    auto& dst = out.channels[c];
    std::vector<double> acc(w);
    for (int y = 0; y < h; ++y) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int j = 0; j <= 2 * r; ++j) {
        const double kj = k[j];
        const double* row = &tmp[static_cast<std::size_t>(yi[y + j]) * w];
        for (int x = 0; x < w; ++x) acc[x] += kj * row[x];
      }
      std::copy(acc.begin(), acc.end(), &dst[static_cast<std::size_t>(y) * w]);
    }
  }
  return out;
}

LayerPair separate(const PixelPatch& p, double sigma) {
  LayerPair lp{gaussian_blur(p, sigma), p.like(), sigma};
  for (int c = 0; c < 3; ++c) {
    const auto& in = p.channels[c];
    auto& base = lp.base.channels[c];
    auto& tex = lp.texture.channels[c];
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = in[i];
      double b = base[i];
      double t = v - b;
      if (b + t != v && v != 0.0 && std::isfinite(v)) {
        // Snap the base onto the grid of v so that v - b is exact.
        const double q = std::nextafter(std::abs(v), std::numeric_limits<double>::infinity()) - std::abs(v);
        const double b2 = std::round(b / q) * q;
        const double t2 = v - b2;
        if (b2 + t2 == v) {
          b = b2;
          t = t2;
        }
      }
      base[i] = b;
      tex[i] = t;
    }
  }
  return lp;
}

PixelPatch recombine(const PixelPatch& base, const PixelPatch& texture) {
  if (!base.same_shape(texture)) throw DimensionError("base and texture dimensions differ");
  if (base.space != texture.space) throw SpaceMismatchError("base and texture spaces differ");
  PixelPatch out = base.like();
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < base.size(); ++i) out.channels[c][i] = base.channels[c][i] + texture.channels[c][i];
  }
  return out;
}

double default_sigma_for_width(int roi_width) {
  return std::clamp(5.0 * roi_width / 200.0, 2.0, 12.0);
}

}  // namespace chromofit
