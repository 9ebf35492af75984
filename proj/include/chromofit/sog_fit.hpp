#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "chromofit/pixelcore.hpp"

namespace chromofit {

/// Row-major scalar image; sample (x, y) sits at pixel centre coordinates (x, y).
struct Field {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Field() = default;
  Field(int w, int h, double fill = 0.0) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
};

Field channel_field(const PixelPatch& p, int channel);

/// Linear skin trend k . x + d.
struct PlaneModel {
  Eigen::Vector2d k = Eigen::Vector2d::Zero();
  double d = 0.0;

  double eval(double x, double y) const { return k.x() * x + k.y() * y + d; }
};

/// Rotated anisotropic 2D Gaussian
///   G(x) = a / (2 pi sx sy) * exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)),
///   Sigma = R(theta) diag(sx, sy)^2 R(theta)^T.
struct GaussianParams {
  double a = 0.0;
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  double sigma_x = 1.0;
  double sigma_y = 1.0;
  double theta = 0.0;
};

/// Wraps theta into [0, pi) and, when sigma_y > sigma_x, swaps the axes and
/// rotates by pi/2 so that sigma_x >= sigma_y. The evaluated function is unchanged.
GaussianParams normalize_gaussian(GaussianParams g);

/// Throws ParameterError for non-positive sigmas.
Eigen::Matrix2d build_covariance(double sigma_x, double sigma_y, double theta);

double eval_gaussian(const GaussianParams& g, const Eigen::Vector2d& x);

/// plane + sum of Gaussians on a width x height grid.
Field eval_model(const PlaneModel& plane, std::span<const GaussianParams> gs, int width, int height);
/// Sum of Gaussians only (the blemish component).
Field eval_blemish(std::span<const GaussianParams> gs, int width, int height);

/// Residual model - observed and its Jacobian. Column order:
/// kx, ky, d, then per Gaussian a, mu_x, mu_y, sigma_x, sigma_y, theta.
struct ResidualJacobian {
  Eigen::VectorXd residual;
  Eigen::MatrixXd jacobian;
};

ResidualJacobian residual_jacobian(const PlaneModel& plane, std::span<const GaussianParams> gs,
                                   const Field& observed);

/// Ordinary least-squares plane (normal equations on centred coordinates).
/// Throws RankError when the samples are collinear or fewer than three.
PlaneModel fit_plane(const Field& field);

struct LmConfig {
  double lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  int max_iter = 200;
  double step_tol = 1e-10;
  /// Stop once an accepted step lowers the cost by less than this fraction.
  double ftol = 1e-6;
};

struct FitConfig {
  int max_gaussians = 5;
  double rel_tol = 1e-3;
  /// A new component is seeded only while max |residual| exceeds
  /// max(amp_threshold_sigmas * std(residual), amp_threshold_floor).
  double amp_threshold_sigmas = 2.0;
  double amp_threshold_floor = 1e-6;
  double init_sigma = 3.0;
  double sigma_min = 0.5;
  double sigma_max = 0.0;  // <= 0: grid diagonal
  LmConfig lm;
  std::uint64_t seed = 42;
  /// Fit on every n-th pixel in x and y; results are in full-grid units.
  /// Reduced automatically if the sampled grid would drop below 8x8.
  int sample_stride = 1;

  friend bool operator==(const FitConfig&, const FitConfig&) = default;
};

struct ChannelFit {
  PlaneModel plane;
  std::vector<GaussianParams> gaussians;
  double rms = 0.0;
  double plane_rms = 0.0;   // rms of the plane-only model
  double greedy_rms = 0.0;  // rms before joint refinement
  int iterations = 0;       // LM iterations over all stages
  bool converged = true;
};

/// Greedy plane + sum-of-Gaussians fit: each new Gaussian is seeded at the
/// residual's absolute maximum and optimized alone with the rest frozen, then
/// all parameters are refined jointly. Never throws on non-convergence; the
/// best model found is returned with converged = false.
ChannelFit fit_incremental(const Field& field, const FitConfig& cfg = {});

/// Fitted model per chromophore channel (H, M, r) of a base-layer patch.
struct BlemishFit {
  int width = 0;
  int height = 0;
  std::array<ChannelFit, 3> channels;

  bool converged() const {
    return channels[0].converged && channels[1].converged && channels[2].converged;
  }

  std::string to_json() const;
  static BlemishFit from_json(const std::string& text);
};

/// Runs fit_incremental independently on each chromophore channel.
BlemishFit fit_blemish(const PixelPatch& base, const FitConfig& cfg = {});

}  // namespace chromofit
