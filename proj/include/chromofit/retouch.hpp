#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chromofit/chromophore.hpp"
#include "chromofit/layers.hpp"
#include "chromofit/pixelcore.hpp"
#include "chromofit/sog_fit.hpp"

namespace chromofit {

/// Per-chromophore multiplier on the fitted blemish: -1 removes it, +1 doubles it.
struct GainVector {
  double h = 0.0;
  double m = 0.0;
  double r = 0.0;

  static constexpr double kMaxAbs = 4.0;

  double operator[](int k) const { return k == kChanH ? h : (k == kChanM ? m : r); }
  bool is_zero() const { return h == 0.0 && m == 0.0 && r == 0.0; }
  /// Throws ParameterError for non-finite gains or |gain| > 4.
  void validate() const;

  friend bool operator==(const GainVector&, const GainVector&) = default;
};

struct GainSchedule {
  std::vector<GainVector> gains;
  std::vector<std::string> labels;  // empty, or one per entry

  /// Throws ParameterError for an empty schedule, bad gains or a label count mismatch.
  void validate() const;
  std::string label(std::size_t i) const;
};

struct RetouchConfig {
  double sigma = 0.0;  // <= 0: default_sigma_for_width(roi.w)
  double reflectance_floor = kDefaultReflectanceFloor;
  FitConfig fit;
  /// Linear ramp of the edit over this many pixels at the ROI border; 0 disables.
  int feather_px = 0;

  /// Fit sampling stride; 0 picks max(1, floor(sigma / 1.5)). The blur leaves
  /// the base with ~1e-5 of its energy above the sampled grid's Nyquist limit.
  int fit_stride = 0;

  double sigma_for(const Roi& roi) const { return sigma > 0.0 ? sigma : default_sigma_for_width(roi.w); }
  FitConfig fit_for(const Roi& roi) const;
};

/// Decomposed and fitted ROI: everything a gain change needs, so rendering never refits.
struct PreparedRoi {
  Roi roi;
  double sigma = 0.0;
  LayerPair layers;  // chromophore space
  BlemishFit fit;
};

/// Decode, convert to chromophore space, separate layers and fit.
PreparedRoi prepare_roi(const RgbImage8& img, const Roi& roi, const MixingMatrix& e, const RetouchConfig& cfg);

std::uint64_t image_hash(const RgbImage8& img);

/// Memo of PreparedRoi values keyed by (image hash, roi, sigma, fit config,
/// mixing matrix). Concurrent requests for one key compute it once.
class FitCache {
 public:
  using Value = std::shared_ptr<const PreparedRoi>;

  Value get_or_compute(const RgbImage8& img, const Roi& roi, const MixingMatrix& e,
                       const RetouchConfig& cfg, bool* was_cached = nullptr);
  /// Returns the entry when present and finished, without computing.
  Value find(const RgbImage8& img, const Roi& roi, const MixingMatrix& e, const RetouchConfig& cfg) const;
  std::size_t size() const;

  static std::string key(std::uint64_t image_hash, const Roi& roi, const MixingMatrix& e,
                         const RetouchConfig& cfg);

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_future<Value>> entries_;
};

/// base_K + alpha_K * blemish_K per chromophore channel. The plane is not used.
/// Throws DimensionError if fit and base geometry differ.
PixelPatch apply_gain(const PixelPatch& base, const BlemishFit& fit, const GainVector& g,
                      int feather_px = 0);

/// alpha_K * blemish_K (optionally feathered) without the base.
PixelPatch gain_delta(const BlemishFit& fit, const GainVector& g, int feather_px = 0);

struct ContrastReport {
  std::array<double, 3> per_channel{};
  double total = 0.0;
};

struct RetouchResult {
  RgbImage8 image;
  GainVector gains;
  std::string label;
  ClampCounts absorption_clamps;
  ClampCounts linear_clamps;
  std::optional<ContrastReport> contrast_before;
  std::optional<ContrastReport> contrast_after;
  std::shared_ptr<const PreparedRoi> prepared;  // null when short-circuited
  bool short_circuit = false;

  bool converged() const { return !prepared || prepared->fit.converged(); }
  /// Sidecar metadata (schema 1).
  std::string to_json() const;
};

/// Recomposes a prepared ROI with gains g into a copy of img.
RetouchResult render(const RgbImage8& img, const PreparedRoi& prepared, const GainVector& g,
                     const MixingMatrix& e, const RetouchConfig& cfg);

/// The edited pixels of `region` (which must contain the prepared roi): source
/// pixels with the roi replaced by its render under gains g. Same bytes as
/// cropping render(...).image, without the full-image copy or contrast pass.
RgbImage8 render_region(const RgbImage8& img, const PreparedRoi& prepared, const GainVector& g,
                        const MixingMatrix& e, const RetouchConfig& cfg, const Roi& region);

/// `roi` grown by `pad` on every side and clipped to a w x h image.
Roi padded_roi(const Roi& roi, int pad, int w, int h);

/// Fit summary (schema 1) shared by the CLI fit command and the server.
std::string fit_report_json(const PreparedRoi& prepared);

/// Full pipeline on one ROI. Zero gains return img unchanged without fitting;
/// pixels outside roi are never modified.
RetouchResult retouch_roi(const RgbImage8& img, const Roi& roi, const GainVector& g, const MixingMatrix& e,
                          const RetouchConfig& cfg = {}, FitCache* cache = nullptr);

/// One fit, one rendered frame per schedule entry, in schedule order.
std::vector<RetouchResult> simulate_fading(const RgbImage8& img, const Roi& roi, const GainSchedule& sched,
                                           const MixingMatrix& e, const RetouchConfig& cfg = {},
                                           FitCache* cache = nullptr);

/// "frame_00.png", "frame_01.png", ...; zero-padded to at least two digits.
std::string frame_name(std::size_t index, std::size_t count);

/// Report for a fading run (schema 1): one entry per frame with its file name
/// and sidecar fields.
std::string fade_report_json(const Roi& roi, const GainSchedule& sched, const std::vector<RetouchResult>& frames);

struct GainGrid {
  RgbImage8 image;
  int tile_w = 0;
  int tile_h = 0;
  int separator = 0;
  /// Top-left pixel of tile (row i, column j).
  std::pair<int, int> tile_origin(int i, int j) const {
    return {separator + j * (tile_w + separator), separator + i * (tile_h + separator)};
  }
};

inline constexpr int kGridSeparator = 4;

/// Rows follow alphas_h, columns alphas_m, alpha_r = 0. The frame around the
/// tile with zero gains is drawn red; other separators are white.
GainGrid gain_matrix(const RgbImage8& img, const Roi& roi, std::span<const double> alphas_h,
                     std::span<const double> alphas_m, const MixingMatrix& e, const RetouchConfig& cfg = {},
                     FitCache* cache = nullptr);

inline constexpr int kContrastRing = 4;

/// Mean absolute deviation of the roi interior in chromophore space from the
/// median of a 4-px ring around it, per channel and summed. Throws RoiError
/// when the ring does not fit inside the image.
ContrastReport blemish_contrast(const RgbImage8& img, const Roi& roi, const MixingMatrix& e,
                                double floor = kDefaultReflectanceFloor);

/// Peak signal-to-noise ratio over all RGB samples; +infinity for identical images.
double psnr(const RgbImage8& a, const RgbImage8& b);
/// Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03) averaged over channels.
double ssim(const RgbImage8& a, const RgbImage8& b);

}  // namespace chromofit
