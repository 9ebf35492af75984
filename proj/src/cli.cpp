#include "chromofit/cli.hpp"

#include <charconv>
#include <fstream>
#include <ostream>
#include <sstream>
#include <system_error>

#include <CLI11.hpp>
#include <json.hpp>

#include "chromofit/chromophore.hpp"
#include "chromofit/errors.hpp"
#include "chromofit/png_io.hpp"

namespace chromofit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Command c) {
  switch (c) {
    case Command::EstimateIca: return "estimate-ica";
    case Command::Fit: return "fit";
    case Command::Retouch: return "retouch";
    case Command::Fade: return "fade";
    case Command::Matrix: return "matrix";
    case Command::Eval: return "eval";
  }
  return "?";
}

namespace {

double parse_number(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ParameterError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string slurp_text(const fs::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& p, const std::string& text) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void require_input(const fs::path& p, const char* what) {
  if (p.empty()) throw ParameterError(std::string(what) + " is required");
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) throw ParameterError(std::string(what) + " does not exist: " + p.string());
}

void require_output(const fs::path& p, const char* what) {
  if (p.empty()) throw ParameterError(std::string(what) + " is required");
}

void require_parent(const fs::path& p) {
  const fs::path parent = p.parent_path();
  std::error_code ec;
  if (!parent.empty() && !fs::is_directory(parent, ec)) {
    throw IoError("output directory does not exist: " + parent.string());
  }
}

const Roi& require_roi(const JobSpec& spec) {
  if (!spec.roi) throw ParameterError("--roi is required for " + to_string(spec.command));
  return *spec.roi;
}

struct Context {
  RgbImage8 image;
  MixingMatrix e = default_mixing_matrix();
  RetouchConfig cfg;
};

Context load_context(const JobSpec& spec) {
  Context ctx;
  if (spec.config) {
    require_input(*spec.config, "--config");
    ctx.cfg = config_from_json(slurp_text(*spec.config));
  }
  if (spec.sigma) {
    if (!(*spec.sigma > 0.0)) throw ParameterError("--sigma must be positive");
    ctx.cfg.sigma = *spec.sigma;
  }
  if (spec.seed) ctx.cfg.fit.seed = *spec.seed;
  if (spec.mixing_matrix) {
    require_input(*spec.mixing_matrix, "--mixing-matrix");
    ctx.e = MixingMatrix::from_json(slurp_text(*spec.mixing_matrix));
  }
  require_input(spec.input, "--in");
  ctx.image = read_png(spec.input);
  return ctx;
}

void emit_report(const JobSpec& spec, const std::string& text, std::ostream& out, bool stdout_fallback) {
  if (spec.report) {
    write_text(*spec.report, text + "\n");
  } else if (stdout_fallback) {
    out << text << "\n";
  }
}

void warn_if(bool converged, std::ostream& err) {
  if (!converged) err << "warning: fit did not converge; see report\n";
}

int cmd_estimate_ica(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  require_output(spec.output, "--out");
  Context ctx = load_context(spec);
  const Roi roi = spec.roi.value_or(Roi{0, 0, ctx.image.width, ctx.image.height});
  validate_roi(roi, ctx.image.width, ctx.image.height);
  if (spec.report) require_parent(*spec.report);
  require_parent(spec.output);

  const PixelPatch logabs = linear_to_log_absorption(srgb_to_linear(ctx.image, roi), ctx.cfg.reflectance_floor);
  const auto samples = collect_samples(logabs);
  IcaConfig ica;
  if (spec.seed) ica.seed = *spec.seed;
  IcaReport rep;
  const MixingMatrix e = estimate_mixing_matrix(samples, ica, &rep);
  write_text(spec.output, e.to_json() + "\n");
  json j;
  j["schema"] = 1;
  j["command"] = "estimate-ica";
  j["samples"] = samples.size();
  j["iterations"] = rep.iterations;
  j["whitening_error"] = rep.whitening_error;
  j["condition_number"] = e.condition_number();
  j["seed"] = e.seed();
  emit_report(spec, j.dump(), out, false);
  (void)err;
  return kExitOk;
}

int cmd_fit(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  Context ctx = load_context(spec);
  const Roi roi = require_roi(spec);
  validate_roi(roi, ctx.image.width, ctx.image.height);
  if (!spec.output.empty()) require_parent(spec.output);
  if (spec.report) require_parent(*spec.report);

  const PreparedRoi p = prepare_roi(ctx.image, roi, ctx.e, ctx.cfg);
  const std::string text = fit_report_json(p);
  if (!spec.output.empty()) {
    write_text(spec.output, text + "\n");
  } else if (!spec.report) {
    out << text << "\n";
  }
  emit_report(spec, text, out, false);
  warn_if(p.fit.converged(), err);
  return kExitOk;
}

int cmd_retouch(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  require_output(spec.output, "--out");
  Context ctx = load_context(spec);
  const Roi roi = require_roi(spec);
  validate_roi(roi, ctx.image.width, ctx.image.height);
  spec.gains.validate();
  require_parent(spec.output);
  if (spec.report) require_parent(*spec.report);

  const RetouchResult r = retouch_roi(ctx.image, roi, spec.gains, ctx.e, ctx.cfg);
  if (r.short_circuit) {
    // Zero gains: the output file is the input file.
    const auto bytes = read_file(spec.input);
    write_file(spec.output, bytes);
  } else {
    write_png(spec.output, r.image);
  }
  const std::string text = r.to_json();
  write_text(sidecar_path(spec.output), text + "\n");
  emit_report(spec, text, out, false);
  warn_if(r.converged(), err);
  return kExitOk;
}

int cmd_fade(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  require_output(spec.output, "--out");
  Context ctx = load_context(spec);
  const Roi roi = require_roi(spec);
  validate_roi(roi, ctx.image.width, ctx.image.height);
  spec.schedule.validate();
  if (spec.report) require_parent(*spec.report);
  std::error_code ec;
  if (fs::exists(spec.output, ec) && !fs::is_directory(spec.output, ec)) {
    throw IoError("--out must be a directory for fade: " + spec.output.string());
  }
  require_parent(spec.output);

  const auto frames = simulate_fading(ctx.image, roi, spec.schedule, ctx.e, ctx.cfg);
  fs::create_directories(spec.output, ec);
  if (ec) throw IoError("cannot create " + spec.output.string() + ": " + ec.message());
  std::vector<std::vector<std::uint8_t>> encoded;
  encoded.reserve(frames.size());
  for (const auto& f : frames) encoded.push_back(encode_png(f.image));
  for (std::size_t i = 0; i < frames.size(); ++i) {
    write_file(spec.output / frame_name(i, frames.size()), encoded[i]);
  }
  const std::string text = fade_report_json(roi, spec.schedule, frames);
  write_text(spec.report.value_or(spec.output / "report.json"), text + "\n");
  bool converged = true;
  for (const auto& f : frames) converged = converged && f.converged();
  warn_if(converged, err);
  (void)out;
  return kExitOk;
}

int cmd_matrix(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  require_output(spec.output, "--out");
  Context ctx = load_context(spec);
  const Roi roi = require_roi(spec);
  validate_roi(roi, ctx.image.width, ctx.image.height);
  if (spec.alphas_h.empty() || spec.alphas_m.empty()) {
    throw ParameterError("matrix needs --alphas-h and --alphas-m");
  }
  require_parent(spec.output);
  if (spec.report) require_parent(*spec.report);

  FitCache cache;
  const GainGrid grid = gain_matrix(ctx.image, roi, spec.alphas_h, spec.alphas_m, ctx.e, ctx.cfg, &cache);
  write_png(spec.output, grid.image);
  json j;
  j["schema"] = 1;
  j["command"] = "matrix";
  j["roi"] = {roi.x, roi.y, roi.w, roi.h};
  j["alphas_h"] = spec.alphas_h;
  j["alphas_m"] = spec.alphas_m;
  j["tile"] = {grid.tile_w, grid.tile_h};
  j["separator"] = grid.separator;
  const auto prepared = cache.find(ctx.image, roi, ctx.e, ctx.cfg);
  j["fit"] = prepared ? json::parse(fit_report_json(*prepared)) : json(nullptr);
  emit_report(spec, j.dump(), out, false);
  warn_if(!prepared || prepared->fit.converged(), err);
  return kExitOk;
}

int cmd_eval(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  Context ctx = load_context(spec);
  require_input(spec.reference, "--ref");
  const RgbImage8 ref = read_png(spec.reference);
  if (ref.width != ctx.image.width || ref.height != ctx.image.height) {
    throw DimensionError("--in and --ref differ in size");
  }
  if (spec.roi) validate_roi(*spec.roi, ctx.image.width, ctx.image.height);
  if (!spec.output.empty()) require_parent(spec.output);
  if (spec.report) require_parent(*spec.report);

  json j;
  j["schema"] = 1;
  j["command"] = "eval";
  const double p = psnr(ctx.image, ref);
  j["psnr"] = std::isinf(p) ? json("inf") : json(p);
  j["ssim"] = ssim(ctx.image, ref);
  if (spec.roi) {
    auto contrast = [&](const RgbImage8& im) {
      const ContrastReport c = blemish_contrast(im, *spec.roi, ctx.e, ctx.cfg.reflectance_floor);
      return json{{"H", c.per_channel[0]}, {"M", c.per_channel[1]}, {"r", c.per_channel[2]}, {"total", c.total}};
    };
    j["contrast"] = contrast(ctx.image);
    j["contrast_ref"] = contrast(ref);
  }
  const std::string text = j.dump();
  if (!spec.output.empty()) write_text(spec.output, text + "\n");
  emit_report(spec, text, out, spec.output.empty());
  (void)err;
  return kExitOk;
}

}  // namespace

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  if (text.empty()) return out;
  for (auto part : split(text, ',')) out.push_back(parse_number(part));
  return out;
}

GainSchedule parse_schedule(const std::string& text) {
  GainSchedule s;
  if (text.empty()) return s;
  for (auto part : split(text, ',')) {
    const auto fields = split(part, ':');
    if (fields.size() == 1) {
      s.gains.push_back(GainVector{0.0, parse_number(fields[0]), 0.0});
    } else if (fields.size() == 3) {
      s.gains.push_back(GainVector{parse_number(fields[0]), parse_number(fields[1]), parse_number(fields[2])});
    } else {
      throw ParameterError("schedule entries are a number or h:m:r, got '" + std::string(part) + "'");
    }
  }
  return s;
}

RetouchConfig config_from_json(const std::string& text, RetouchConfig cfg) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ParameterError("config must be a JSON object");
    cfg.sigma = j.value("sigma", cfg.sigma);
    cfg.reflectance_floor = j.value("reflectance_floor", cfg.reflectance_floor);
    cfg.feather_px = j.value("feather_px", cfg.feather_px);
    cfg.fit_stride = j.value("fit_stride", cfg.fit_stride);
    if (j.contains("fit")) {
      const json& f = j.at("fit");
      FitConfig& c = cfg.fit;
      c.max_gaussians = f.value("max_gaussians", c.max_gaussians);
      c.rel_tol = f.value("rel_tol", c.rel_tol);
      c.amp_threshold_sigmas = f.value("amp_threshold_sigmas", c.amp_threshold_sigmas);
      c.amp_threshold_floor = f.value("amp_threshold_floor", c.amp_threshold_floor);
      c.init_sigma = f.value("init_sigma", c.init_sigma);
      c.sigma_min = f.value("sigma_min", c.sigma_min);
      c.sigma_max = f.value("sigma_max", c.sigma_max);
      c.seed = f.value("seed", c.seed);
      if (f.contains("lm")) {
        const json& l = f.at("lm");
        c.lm.lambda0 = l.value("lambda0", c.lm.lambda0);
        c.lm.lambda_up = l.value("lambda_up", c.lm.lambda_up);
        c.lm.lambda_down = l.value("lambda_down", c.lm.lambda_down);
        c.lm.max_iter = l.value("max_iter", c.lm.max_iter);
        c.lm.step_tol = l.value("step_tol", c.lm.step_tol);
        c.lm.ftol = l.value("ftol", c.lm.ftol);
      }
    }
  } catch (const json::exception& ex) {
    throw ParameterError(std::string("config: ") + ex.what());
  }
  if (!(cfg.reflectance_floor > 0.0 && cfg.reflectance_floor < 1.0)) {
    throw ParameterError("config: reflectance_floor must be in (0, 1)");
  }
  if (cfg.feather_px < 0 || cfg.fit_stride < 0) throw ParameterError("config: negative feather_px or fit_stride");
  if (cfg.fit.max_gaussians < 0 || cfg.fit.lm.max_iter < 1) throw ParameterError("config: invalid fit limits");
  return cfg;
}

fs::path sidecar_path(const fs::path& output) {
  fs::path p = output;
  if (p.extension() == ".png" || p.extension() == ".PNG") p.replace_extension();
  p += ".retouch.json";
  return p;
}

std::optional<JobSpec> parse_args(int argc, const char* const* argv, std::ostream& out) {
  CLI::App app{"Chromophore blemish fitting and retouching"};
  app.require_subcommand(1);

  JobSpec spec;
  std::string in, outp, ref, report, mixing, config, roi, schedule, alphas_h, alphas_m, labels;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  double ah = 0.0, am = 0.0, ar = 0.0;

  auto common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--in", in, "Input PNG")->required();
    auto* o = sub->add_option("--out", outp, "Output path");
    if (needs_out) o->required();
    sub->add_option("--report", report, "Report JSON path");
    sub->add_option("--mixing-matrix", mixing, "Mixing matrix JSON");
    sub->add_option("--config", config, "Config JSON (flags win)");
    sub->add_option("--sigma", sigma, "Blur sigma in pixels");
    sub->add_option("--seed", seed, "Random seed");
  };
  auto roi_opt = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--roi", roi, "x,y,w,h");
    if (required) o->required();
  };

  auto* ica = app.add_subcommand("estimate-ica", "Estimate the mixing matrix with FastICA");
  common(ica, true);
  roi_opt(ica, false);
  auto* fit = app.add_subcommand("fit", "Fit plane + Gaussians to an ROI");
  common(fit, false);
  roi_opt(fit, true);
  auto* ret = app.add_subcommand("retouch", "Apply per-chromophore gains to an ROI");
  common(ret, true);
  roi_opt(ret, true);
  ret->add_option("--alpha-h", ah, "Haemoglobin gain");
  ret->add_option("--alpha-m", am, "Melanin gain");
  ret->add_option("--alpha-r", ar, "Residual gain");
  auto* fade = app.add_subcommand("fade", "Render a fading sequence");
  common(fade, true);
  roi_opt(fade, true);
  fade->add_option("--schedule", schedule, "Gains: m1,m2,... or h:m:r,...")->required();
  fade->add_option("--labels", labels, "Comma-separated frame labels");
  auto* mat = app.add_subcommand("matrix", "Render a gain matrix");
  common(mat, true);
  roi_opt(mat, true);
  mat->add_option("--alphas-h", alphas_h, "Row gains")->required();
  mat->add_option("--alphas-m", alphas_m, "Column gains")->required();
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM/contrast between two images");
  common(ev, false);
  roi_opt(ev, false);
  ev->add_option("--ref", ref, "Reference PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return std::nullopt;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return std::nullopt;
  } catch (const CLI::ParseError& ex) {
    throw ParameterError(ex.what());
  }

  CLI::App* used = app.get_subcommands().front();
  const std::string name = used->get_name();
  if (name == "estimate-ica") spec.command = Command::EstimateIca;
  if (name == "fit") spec.command = Command::Fit;
  if (name == "retouch") spec.command = Command::Retouch;
  if (name == "fade") spec.command = Command::Fade;
  if (name == "matrix") spec.command = Command::Matrix;
  if (name == "eval") spec.command = Command::Eval;

  spec.input = in;
  spec.output = outp;
  spec.reference = ref;
  if (!report.empty()) spec.report = fs::path(report);
  if (!mixing.empty()) spec.mixing_matrix = fs::path(mixing);
  if (!config.empty()) spec.config = fs::path(config);
  if (!roi.empty()) spec.roi = parse_roi(roi);
  if (used->count("--sigma")) spec.sigma = sigma;
  if (used->count("--seed")) spec.seed = seed;
  spec.gains = GainVector{ah, am, ar};
  if (spec.command == Command::Fade) {
    spec.schedule = parse_schedule(schedule);
    if (!labels.empty()) {
      for (auto l : split(labels, ',')) spec.schedule.labels.emplace_back(l);
    }
  }
  if (spec.command == Command::Matrix) {
    spec.alphas_h = parse_list(alphas_h);
    spec.alphas_m = parse_list(alphas_m);
  }
  return spec;
}

int run(const JobSpec& spec, std::ostream& out, std::ostream& err) {
  try {
    switch (spec.command) {
      case Command::EstimateIca: return cmd_estimate_ica(spec, out, err);
      case Command::Fit: return cmd_fit(spec, out, err);
      case Command::Retouch: return cmd_retouch(spec, out, err);
      case Command::Fade: return cmd_fade(spec, out, err);
      case Command::Matrix: return cmd_matrix(spec, out, err);
      case Command::Eval: return cmd_eval(spec, out, err);
    }
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitIo;
  } catch (const ConvergenceError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::optional<JobSpec> spec;
  try {
    spec = parse_args(argc, argv, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitValidation;
  }
  if (!spec) return kExitOk;
  return run(*spec, out, err);
}

}  // namespace chromofit::cli
