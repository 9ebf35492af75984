#pragma once

#include <vector>

#include "chromofit/pixelcore.hpp"

namespace chromofit {

struct LayerPair {
  PixelPatch base;     // low-frequency diffusion layer
  PixelPatch texture;  // input - base
  double sigma = 0.0;
};

/// Normalized sampled Gaussian, radius ceil(3 sigma), length 2 * radius + 1.
std::vector<double> gaussian_kernel(double sigma);

/// Maps an out-of-range index into [0, n) by reflect-101 mirroring (dcb|abcd|cba).
int reflect101(int i, int n);

/// Separable Gaussian low-pass with reflect-101 borders. Throws ParameterError for sigma <= 0.
PixelPatch gaussian_blur(const PixelPatch& p, double sigma);

/// base = blur(p), texture = p - base. base + texture reproduces p bit for bit;
/// where floating-point cancellation would break that, base is nudged by at
/// most a few ulps so the identity holds.
LayerPair separate(const PixelPatch& p, double sigma);

/// Element-wise base + texture.
PixelPatch recombine(const PixelPatch& base, const PixelPatch& texture);

/// Blur width used when the caller does not give one: 5 * w / 200 clamped to [2, 12].
double default_sigma_for_width(int roi_width);

}  // namespace chromofit
