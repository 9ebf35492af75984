#include "chromofit/retouch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "chromofit/errors.hpp"
#include "json_format.hpp"

namespace chromofit {

void GainVector::validate() const {
  for (double v : {h, m, r}) {
    if (!std::isfinite(v) || std::abs(v) > kMaxAbs) throw ParameterError("gains must be finite with |gain| <= 4");
  }
}

void GainSchedule::validate() const {
  if (gains.empty()) throw ParameterError("gain schedule is empty");
  if (!labels.empty() && labels.size() != gains.size()) {
    throw ParameterError("gain schedule label count does not match entry count");
  }
  for (const auto& g : gains) g.validate();
}

std::string GainSchedule::label(std::size_t i) const { return labels.empty() ? std::to_string(i) : labels[i]; }

std::uint64_t image_hash(const RgbImage8& img) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  for (int v : {img.width, img.height}) {
    for (int s = 0; s < 32; s += 8) mix(static_cast<std::uint8_t>(v >> s));
  }
  for (auto b : img.data) mix(b);
  mix(img.has_alpha() ? 1 : 0);
  for (auto b : img.alpha) mix(b);
  return h;
}

PreparedRoi prepare_roi(const RgbImage8& img, const Roi& roi, const MixingMatrix& e, const RetouchConfig& cfg) {
  img.validate();
  validate_roi(roi, img.width, img.height);
  const double sigma = cfg.sigma_for(roi);
  const PixelPatch chrom = to_chromophore(
      linear_to_log_absorption(srgb_to_linear(img, roi), cfg.reflectance_floor), e);
  PreparedRoi out;
  out.roi = roi;
  out.sigma = sigma;
  out.layers = separate(chrom, sigma);
  out.fit = fit_blemish(out.layers.base, cfg.fit_for(roi));
  return out;
}

FitConfig RetouchConfig::fit_for(const Roi& roi) const {
  FitConfig f = fit;
  f.sample_stride = fit_stride > 0 ? fit_stride : std::max(1, static_cast<int>(std::floor(sigma_for(roi) / 1.5)));
  return f;
}

std::string FitCache::key(std::uint64_t hash, const Roi& roi, const MixingMatrix& e, const RetouchConfig& cfg) {
  using detail::fmt17;
  const FitConfig f = cfg.fit_for(roi);
  std::string k = std::to_string(hash) + "|" + std::to_string(roi.x) + "," + std::to_string(roi.y) + "," +
                  std::to_string(roi.w) + "," + std::to_string(roi.h) + "|" + fmt17(cfg.sigma_for(roi)) + "|" +
                  fmt17(cfg.reflectance_floor) + "|" + std::to_string(f.max_gaussians) + "," + fmt17(f.rel_tol) +
                  "," + fmt17(f.amp_threshold_sigmas) + "," + fmt17(f.amp_threshold_floor) + "," +
                  fmt17(f.init_sigma) + "," + fmt17(f.sigma_min) + "," + fmt17(f.sigma_max) + "," +
                  fmt17(f.lm.lambda0) + "," + fmt17(f.lm.lambda_up) + "," + fmt17(f.lm.lambda_down) + "," +
                  std::to_string(f.lm.max_iter) + "," + fmt17(f.lm.step_tol) + "," + fmt17(f.lm.ftol) + "," + std::to_string(f.seed) + "," +
                  std::to_string(f.sample_stride) + "|" +
                  e.to_json();
  return k;
}

FitCache::Value FitCache::get_or_compute(const RgbImage8& img, const Roi& roi, const MixingMatrix& e,
                                         const RetouchConfig& cfg, bool* was_cached) {
  const std::string k = key(image_hash(img), roi, e, cfg);
  std::promise<Value> promise;
  std::unique_lock lock(mu_);
  if (auto it = entries_.find(k); it != entries_.end()) {
    auto fut = it->second;
    lock.unlock();
    if (was_cached) *was_cached = true;
    return fut.get();
  }
  entries_.emplace(k, promise.get_future().share());
  lock.unlock();
  if (was_cached) *was_cached = false;
  try {
    auto value = std::make_shared<const PreparedRoi>(prepare_roi(img, roi, e, cfg));
    promise.set_value(value);
    return value;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(mu_);
    entries_.erase(k);
    throw;
  }
}

FitCache::Value FitCache::find(const RgbImage8& img, const Roi& roi, const MixingMatrix& e,
                               const RetouchConfig& cfg) const {
  const std::string k = key(image_hash(img), roi, e, cfg);
  std::lock_guard lock(mu_);
  auto it = entries_.find(k);
  if (it == entries_.end()) return nullptr;
  if (it->second.wait_for(std::chrono::seconds(0)) != std::future_status::ready) return nullptr;
  return it->second.get();
}

std::size_t FitCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

PixelPatch gain_delta(const BlemishFit& fit, const GainVector& g, int feather_px) {
  PixelPatch delta(fit.width, fit.height, Space::Chromophore);
  for (int k = 0; k < 3; ++k) {
    const double alpha = g[k];
    if (alpha == 0.0) continue;
    const Field blem = eval_blemish(fit.channels[k].gaussians, fit.width, fit.height);
    auto& dst = delta.channels[k];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = alpha * blem.values[i];
    if (feather_px > 0) {
      for (int y = 0; y < fit.height; ++y) {
        for (int x = 0; x < fit.width; ++x) {
          const int d = std::min({x, y, fit.width - 1 - x, fit.height - 1 - y});
          if (d < feather_px) delta.at(k, x, y) *= static_cast<double>(d + 1) / (feather_px + 1);
        }
      }
    }
  }
  return delta;
}

PixelPatch apply_gain(const PixelPatch& base, const BlemishFit& fit, const GainVector& g, int feather_px) {
  require_space(base, Space::Chromophore, "apply_gain");
  if (base.width != fit.width || base.height != fit.height) {
    throw DimensionError("blemish fit geometry does not match the base patch");
  }
  g.validate();
  const PixelPatch delta = gain_delta(fit, g, feather_px);
  PixelPatch out = base;
  for (int k = 0; k < 3; ++k) {
    if (g[k] == 0.0) continue;
    for (std::size_t i = 0; i < out.size(); ++i) out.channels[k][i] = base.channels[k][i] + delta.channels[k][i];
  }
  return out;
}

namespace {

bool contrast_margin_ok(const RgbImage8& img, const Roi& roi) {
  return roi.x >= kContrastRing && roi.y >= kContrastRing && roi.x + roi.w + kContrastRing <= img.width &&
         roi.y + roi.h + kContrastRing <= img.height;
}

RgbImage8 edited_pixels(const PreparedRoi& prepared, const GainVector& g, const MixingMatrix& e,
                        const RetouchConfig& cfg, ClampCounts* absorption_clamps, ClampCounts* linear_clamps) {
  const PixelPatch edited = apply_gain(prepared.layers.base, prepared.fit, g, cfg.feather_px);
  const PixelPatch chrom = recombine(edited, prepared.layers.texture);
  const PixelPatch absorption = from_chromophore(chrom, e, absorption_clamps);
  const PixelPatch linear = log_absorption_to_linear(absorption, cfg.reflectance_floor, linear_clamps);
  return linear_to_srgb(linear);
}

void fill_contrast(RetouchResult& res, const RgbImage8& before, const Roi& roi, const MixingMatrix& e,
                   const RetouchConfig& cfg) {
  if (!contrast_margin_ok(before, roi)) return;
  res.contrast_before = blemish_contrast(before, roi, e, cfg.reflectance_floor);
  res.contrast_after = res.short_circuit ? res.contrast_before
                                         : blemish_contrast(res.image, roi, e, cfg.reflectance_floor);
}

nlohmann::json contrast_json(const std::optional<ContrastReport>& c) {
  if (!c) return nullptr;
  return {{"H", c->per_channel[0]}, {"M", c->per_channel[1]}, {"r", c->per_channel[2]}, {"total", c->total}};
}

}  // namespace

RetouchResult render(const RgbImage8& img, const PreparedRoi& prepared, const GainVector& g, const MixingMatrix& e,
                     const RetouchConfig& cfg) {
  g.validate();
  RetouchResult res;
  res.gains = g;
  res.image = img;
  if (g.is_zero()) {
    res.short_circuit = true;
    fill_contrast(res, img, prepared.roi, e, cfg);
    return res;
  }
  paste(res.image, edited_pixels(prepared, g, e, cfg, &res.absorption_clamps, &res.linear_clamps),
        prepared.roi.x, prepared.roi.y);
  fill_contrast(res, img, prepared.roi, e, cfg);
  return res;
}

RgbImage8 render_region(const RgbImage8& img, const PreparedRoi& prepared, const GainVector& g,
                        const MixingMatrix& e, const RetouchConfig& cfg, const Roi& region) {
  g.validate();
  validate_roi(region, img.width, img.height);
  const Roi& roi = prepared.roi;
  if (roi.x < region.x || roi.y < region.y || roi.x + roi.w > region.x + region.w ||
      roi.y + roi.h > region.y + region.h) {
    throw RoiError("render region must contain the fitted roi");
  }
  RgbImage8 out = crop(img, region);
  if (g.is_zero()) return out;
  paste(out, edited_pixels(prepared, g, e, cfg, nullptr, nullptr), roi.x - region.x, roi.y - region.y);
  return out;
}

Roi padded_roi(const Roi& roi, int pad, int w, int h) {
  const int x0 = std::max(0, roi.x - pad), y0 = std::max(0, roi.y - pad);
  const int x1 = std::min(w, roi.x + roi.w + pad), y1 = std::min(h, roi.y + roi.h + pad);
  return Roi{x0, y0, x1 - x0, y1 - y0};
}

std::string fit_report_json(const PreparedRoi& prepared) {
  static constexpr const char* kNames[3] = {"H", "M", "r"};
  const auto& f = prepared.fit;
  nlohmann::json j;
  j["schema"] = 1;
  j["roi"] = {prepared.roi.x, prepared.roi.y, prepared.roi.w, prepared.roi.h};
  j["sigma"] = prepared.sigma;
  nlohmann::json ch = nlohmann::json::object();
  for (int k = 0; k < 3; ++k) {
    const auto& c = f.channels[k];
    ch[kNames[k]] = {{"n", c.gaussians.size()},
                     {"rms", c.rms},
                     {"plane_rms", c.plane_rms},
                     {"iterations", c.iterations},
                     {"converged", c.converged}};
  }
  j["channels"] = std::move(ch);
  j["converged"] = f.converged();
  j["warning"] = f.converged() ? nlohmann::json(nullptr) : nlohmann::json("fit did not converge");
  j["model"] = nlohmann::json::parse(f.to_json());
  return j.dump();
}

RetouchResult retouch_roi(const RgbImage8& img, const Roi& roi, const GainVector& g, const MixingMatrix& e,
                          const RetouchConfig& cfg, FitCache* cache) {
  img.validate();
  validate_roi(roi, img.width, img.height);
  g.validate();
  if (g.is_zero()) {
    RetouchResult res;
    res.gains = g;
    res.image = img;
    res.short_circuit = true;
    fill_contrast(res, img, roi, e, cfg);
    return res;
  }
  std::shared_ptr<const PreparedRoi> prepared =
      cache ? cache->get_or_compute(img, roi, e, cfg) : std::make_shared<const PreparedRoi>(prepare_roi(img, roi, e, cfg));
  RetouchResult res = render(img, *prepared, g, e, cfg);
  res.prepared = std::move(prepared);
  return res;
}

std::vector<RetouchResult> simulate_fading(const RgbImage8& img, const Roi& roi, const GainSchedule& sched,
                                           const MixingMatrix& e, const RetouchConfig& cfg, FitCache* cache) {
  img.validate();
  validate_roi(roi, img.width, img.height);
  sched.validate();
  std::shared_ptr<const PreparedRoi> prepared;
  const bool any_edit = std::any_of(sched.gains.begin(), sched.gains.end(), [](const GainVector& g) { return !g.is_zero(); });
  if (any_edit) {
    prepared = cache ? cache->get_or_compute(img, roi, e, cfg)
                     : std::make_shared<const PreparedRoi>(prepare_roi(img, roi, e, cfg));
  }
  std::vector<RetouchResult> out;
  out.reserve(sched.gains.size());
  for (std::size_t i = 0; i < sched.gains.size(); ++i) {
    RetouchResult r;
    if (prepared) {
      r = render(img, *prepared, sched.gains[i], e, cfg);
      r.prepared = prepared;
    } else {
      r = retouch_roi(img, roi, sched.gains[i], e, cfg);
    }
    r.label = sched.label(i);
    out.push_back(std::move(r));
  }
  return out;
}

std::string frame_name(std::size_t index, std::size_t count) {
  const std::size_t digits = std::max<std::size_t>(2, std::to_string(count > 0 ? count - 1 : 0).size());
  std::string n = std::to_string(index);
  if (n.size() < digits) n.insert(0, digits - n.size(), '0');
  return "frame_" + n + ".png";
}

std::string fade_report_json(const Roi& roi, const GainSchedule& sched, const std::vector<RetouchResult>& frames) {
  nlohmann::json j;
  j["schema"] = 1;
  j["roi"] = {roi.x, roi.y, roi.w, roi.h};
  nlohmann::json list = nlohmann::json::array();
  bool converged = true;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    nlohmann::json f = nlohmann::json::parse(frames[i].to_json());
    f["file"] = frame_name(i, frames.size());
    f["label"] = sched.label(i);
    list.push_back(std::move(f));
    converged = converged && frames[i].converged();
  }
  j["frames"] = std::move(list);
  j["warning"] = converged ? nlohmann::json(nullptr) : nlohmann::json("fit did not converge");
  return j.dump();
}

GainGrid gain_matrix(const RgbImage8& img, const Roi& roi, std::span<const double> alphas_h,
                     std::span<const double> alphas_m, const MixingMatrix& e, const RetouchConfig& cfg,
                     FitCache* cache) {
  img.validate();
  validate_roi(roi, img.width, img.height);
  if (alphas_h.empty() || alphas_m.empty()) throw ParameterError("gain matrix needs non-empty gain lists");
  for (double a : alphas_h) GainVector{a, 0.0, 0.0}.validate();
  for (double a : alphas_m) GainVector{0.0, a, 0.0}.validate();

  const bool any_edit = std::any_of(alphas_h.begin(), alphas_h.end(), [](double a) { return a != 0.0; }) ||
                        std::any_of(alphas_m.begin(), alphas_m.end(), [](double a) { return a != 0.0; });
  std::shared_ptr<const PreparedRoi> prepared;
  if (any_edit) {
    prepared = cache ? cache->get_or_compute(img, roi, e, cfg)
                     : std::make_shared<const PreparedRoi>(prepare_roi(img, roi, e, cfg));
  }

  GainGrid grid;
  grid.tile_w = roi.w;
  grid.tile_h = roi.h;
  grid.separator = kGridSeparator;
  const int rows = static_cast<int>(alphas_h.size());
  const int cols = static_cast<int>(alphas_m.size());
  grid.image = RgbImage8(cols * roi.w + (cols + 1) * kGridSeparator, rows * roi.h + (rows + 1) * kGridSeparator);
  std::fill(grid.image.data.begin(), grid.image.data.end(), std::uint8_t{255});

  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const GainVector g{alphas_h[static_cast<std::size_t>(i)], alphas_m[static_cast<std::size_t>(j)], 0.0};
      const RgbImage8 rendered = prepared ? render(img, *prepared, g, e, cfg).image : img;
      const auto [ox, oy] = grid.tile_origin(i, j);
      paste(grid.image, crop(rendered, roi), ox, oy);
      if (g.is_zero()) {
        // Red frame in the separator band around the original.
        for (int y = oy - kGridSeparator; y < oy + roi.h + kGridSeparator; ++y) {
          for (int x = ox - kGridSeparator; x < ox + roi.w + kGridSeparator; ++x) {
            if (x >= ox && x < ox + roi.w && y >= oy && y < oy + roi.h) continue;
            grid.image.at(x, y, 0) = 255;
            grid.image.at(x, y, 1) = 0;
            grid.image.at(x, y, 2) = 0;
          }
        }
      }
    }
  }
  return grid;
}

ContrastReport blemish_contrast(const RgbImage8& img, const Roi& roi, const MixingMatrix& e, double floor) {
  img.validate();
  validate_roi(roi, img.width, img.height);
  if (!contrast_margin_ok(img, roi)) throw RoiError("blemish contrast needs a 4-px margin around the roi");
  const Roi outer{roi.x - kContrastRing, roi.y - kContrastRing, roi.w + 2 * kContrastRing,
                  roi.h + 2 * kContrastRing};
  const PixelPatch chrom = to_chromophore(linear_to_log_absorption(srgb_to_linear(img, outer), floor), e);
  ContrastReport rep;
  std::vector<double> ring;
  for (int k = 0; k < 3; ++k) {
    ring.clear();
    for (int y = 0; y < outer.h; ++y) {
      for (int x = 0; x < outer.w; ++x) {
        const bool inside = x >= kContrastRing && x < kContrastRing + roi.w && y >= kContrastRing &&
                            y < kContrastRing + roi.h;
        if (!inside) ring.push_back(chrom.at(k, x, y));
      }
    }
    const std::size_t mid = ring.size() / 2;
    std::nth_element(ring.begin(), ring.begin() + static_cast<std::ptrdiff_t>(mid), ring.end());
    double median = ring[mid];
    if (ring.size() % 2 == 0) {
      const double lower = *std::max_element(ring.begin(), ring.begin() + static_cast<std::ptrdiff_t>(mid));
      median = 0.5 * (median + lower);
    }
    double sum = 0.0;
    for (int y = 0; y < roi.h; ++y) {
      for (int x = 0; x < roi.w; ++x) sum += std::abs(chrom.at(k, x + kContrastRing, y + kContrastRing) - median);
    }
    rep.per_channel[k] = sum / (static_cast<double>(roi.w) * roi.h);
    rep.total += rep.per_channel[k];
  }
  return rep;
}

double psnr(const RgbImage8& a, const RgbImage8& b) {
  a.validate();
  b.validate();
  if (a.width != b.width || a.height != b.height) throw DimensionError("psnr: image dimensions differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.data.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const RgbImage8& a, const RgbImage8& b) {
  a.validate();
  b.validate();
  if (a.width != b.width || a.height != b.height) throw DimensionError("ssim: image dimensions differ");
  constexpr int kWin = 11;
  constexpr int kRad = kWin / 2;
  if (a.width < kWin || a.height < kWin) throw DimensionError("ssim needs images of at least 11x11");
  std::array<double, kWin> w{};
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    w[i] = std::exp(-0.5 * (i - kRad) * (i - kRad) / (1.5 * 1.5));
    wsum += w[i];
  }
  for (auto& v : w) v /= wsum;
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const int ow = a.width - kWin + 1;
  const int oh = a.height - kWin + 1;

  // Valid-region separable filtering of x, y, x^2, y^2, xy.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<std::size_t>(a.height) * ow);
    for (int y = 0; y < a.height; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int k = 0; k < kWin; ++k) acc += w[k] * src[static_cast<std::size_t>(y) * a.width + x + k];
        tmp[static_cast<std::size_t>(y) * ow + x] = acc;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int k = 0; k < kWin; ++k) acc += w[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = acc;
      }
    }
    return out;
  };

  const std::size_t n = static_cast<std::size_t>(a.width) * a.height;
  double total = 0.0;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.data[i * 3 + c];
      y[i] = b.data[i * 3 + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter(x), my = filter(y), mxx = filter(xx), myy = filter(yy), mxy = filter(xy);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cxy = mxy[i] - mx[i] * my[i];
      sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / 3.0;
}

std::string RetouchResult::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["gains"] = {{"h", gains.h}, {"m", gains.m}, {"r", gains.r}};
  j["label"] = label;
  j["short_circuit"] = short_circuit;
  j["clamps"] = {{"absorption", absorption_clamps.per_channel}, {"linear", linear_clamps.per_channel}};
  j["contrast_before"] = contrast_json(contrast_before);
  j["contrast_after"] = contrast_json(contrast_after);
  if (contrast_before && contrast_after && contrast_before->total > 0.0) {
    j["contrast_drop"] = 1.0 - contrast_after->total / contrast_before->total;
  } else {
    j["contrast_drop"] = nullptr;
  }
  if (prepared) {
    const auto& f = prepared->fit;
    j["fit"] = {{"roi", {prepared->roi.x, prepared->roi.y, prepared->roi.w, prepared->roi.h}},
                {"sigma", prepared->sigma},
                {"n", {f.channels[0].gaussians.size(), f.channels[1].gaussians.size(), f.channels[2].gaussians.size()}},
                {"rms", {f.channels[0].rms, f.channels[1].rms, f.channels[2].rms}},
                {"converged", f.converged()}};
  } else {
    j["fit"] = nullptr;
  }
  j["warning"] = converged() ? nlohmann::json(nullptr) : nlohmann::json("fit did not converge");
  return j.dump();
}

}  // namespace chromofit
