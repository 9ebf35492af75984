#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "chromofit/pixelcore.hpp"

namespace chromofit {

/// Log-absorption triple (R, G, B) of one pixel.
using ChromophoreSample = Eigen::Vector3d;

inline constexpr int kChanH = 0;
inline constexpr int kChanM = 1;
inline constexpr int kChanR = 2;

/// 3x3 map from chromophore concentrations (H, M, r) to RGB log-absorption.
/// Rows are camera channels, columns chromophores. The inverse is cached.
class MixingMatrix {
 public:
  static constexpr double kMaxCondition = 1e6;

  /// Throws ParameterError if e is singular, non-finite or has condition number >= 1e6.
  explicit MixingMatrix(const Eigen::Matrix3d& e, std::uint64_t seed = 42);

  const Eigen::Matrix3d& matrix() const { return e_; }
  const Eigen::Matrix3d& inverse() const { return inv_; }
  std::uint64_t seed() const { return seed_; }
  double condition_number() const;

  std::string to_json() const;
  static MixingMatrix from_json(const std::string& text);

  friend bool operator==(const MixingMatrix& a, const MixingMatrix& b) {
    return a.e_ == b.e_ && a.seed_ == b.seed_;
  }

 private:
  Eigen::Matrix3d e_;
  Eigen::Matrix3d inv_;
  std::uint64_t seed_;
};

/// Bundled matrix used when no estimate is supplied.
const MixingMatrix& default_mixing_matrix();

struct IcaConfig {
  std::uint64_t seed = 42;
  double tol = 1e-6;
  int max_iter = 500;
  static constexpr std::size_t kMinSamples = 1000;
};

/// Diagnostics of one FastICA run.
struct IcaReport {
  int iterations = 0;
  double whitening_error = 0.0;  // max |cov(z) - I|
};

/// FastICA (log-cosh contrast, symmetric decorrelation) on log-absorption
/// samples, followed by column canonicalization into (H, M, r) order.
/// Throws DegenerateSamplesError for < 1000 samples or a rank-deficient
/// covariance, ConvergenceError when max_iter is exhausted.
MixingMatrix estimate_mixing_matrix(std::span<const ChromophoreSample> samples,
                                    const IcaConfig& cfg = {}, IcaReport* report = nullptr);

/// Reorders and sign-fixes the columns of a raw ICA mixing estimate:
/// melanin = most monotonically increasing R->B profile, haemoglobin = most
/// green-dominant of the rest, residual = remaining column. Each column's sign
/// is chosen so the mean concentration over samples is nonnegative.
Eigen::Matrix3d canonicalize_columns(const Eigen::Matrix3d& mixing,
                                     std::span<const ChromophoreSample> samples);

/// Gathers log-absorption samples from a patch, uniformly strided down to at
/// most max_samples. mask (row-major, same size) selects pixels when given.
std::vector<ChromophoreSample> collect_samples(const PixelPatch& log_absorption,
                                               std::size_t max_samples = 50000,
                                               std::optional<std::span<const std::uint8_t>> mask = std::nullopt);

PixelPatch to_chromophore(const PixelPatch& p, const MixingMatrix& e);
/// Output absorption is clamped to >= 0; the number of clamped values per
/// RGB channel is accumulated into clamped when given.
PixelPatch from_chromophore(const PixelPatch& p, const MixingMatrix& e, ClampCounts* clamped = nullptr);

}  // namespace chromofit
