#include "chromofit/sog_fit.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

#include <Eigen/Dense>
#include <json.hpp>

#include "chromofit/errors.hpp"
#include "json_format.hpp"

namespace chromofit {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_theta(double theta) {
  double t = std::fmod(theta, std::numbers::pi);
  if (t < 0.0) t += std::numbers::pi;
  if (t >= std::numbers::pi) t = 0.0;
  return t;
}

/// Value of g at (x, y) and, when grad is non-null, its partials with respect
/// to (a, mu_x, mu_y, sigma_x, sigma_y, theta).
double gaussian_and_gradient(const GaussianParams& g, double c, double s, double x, double y, double* grad) {
  const double dx = x - g.mu.x();
  const double dy = y - g.mu.y();
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double isx2 = 1.0 / (g.sigma_x * g.sigma_x);
  const double isy2 = 1.0 / (g.sigma_y * g.sigma_y);
  const double shape = std::exp(-0.5 * (u * u * isx2 + v * v * isy2)) / (kTwoPi * g.sigma_x * g.sigma_y);
  const double val = g.a * shape;
  if (grad) {
    grad[0] = shape;
    grad[1] = val * (u * c * isx2 - v * s * isy2);
    grad[2] = val * (u * s * isx2 + v * c * isy2);
    grad[3] = val * (u * u * isx2 - 1.0) / g.sigma_x;
    grad[4] = val * (v * v * isy2 - 1.0) / g.sigma_y;
    grad[5] = -val * u * v * (isx2 - isy2);
  }
  return val;
}

double softplus(double u) { return u > 30.0 ? u : std::log1p(std::exp(u)); }
double softplus_inv(double v) { return v > 30.0 ? v : std::log(std::expm1(v)); }
double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

double rms_of(const Eigen::VectorXd& r) {
  return r.size() == 0 ? 0.0 : std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
}

/// Free parameters of an LM stage, held in the solver's unconstrained coordinates:
/// optional plane (kx, ky, d) followed by per Gaussian (a, mu_x, mu_y, u_x, u_y, theta)
/// with sigma = sigma_min + softplus(u).
struct Parameterization {
  bool with_plane = false;
  int n_gauss = 0;
  double sigma_min = 0.5;
  double sigma_max = 1e9;
  double mu_lo_x = 0.0, mu_hi_x = 0.0, mu_lo_y = 0.0, mu_hi_y = 0.0;

  int size() const { return (with_plane ? 3 : 0) + 6 * n_gauss; }

  Eigen::VectorXd pack(const PlaneModel& plane, std::span<const GaussianParams> gs) const {
    Eigen::VectorXd p(size());
    int o = 0;
    if (with_plane) {
      p(o++) = plane.k.x();
      p(o++) = plane.k.y();
      p(o++) = plane.d;
    }
    for (const auto& g : gs) {
      p(o++) = g.a;
      p(o++) = g.mu.x();
      p(o++) = g.mu.y();
      p(o++) = softplus_inv(std::max(g.sigma_x - sigma_min, 1e-12));
      p(o++) = softplus_inv(std::max(g.sigma_y - sigma_min, 1e-12));
      p(o++) = g.theta;
    }
    return p;
  }

  void unpack(const Eigen::VectorXd& p, PlaneModel& plane, std::vector<GaussianParams>& gs) const {
    int o = 0;
    if (with_plane) {
      plane.k = Eigen::Vector2d(p(0), p(1));
      plane.d = p(2);
      o = 3;
    }
    gs.resize(n_gauss);
    for (auto& g : gs) {
      g.a = p(o++);
      g.mu = Eigen::Vector2d(p(o), p(o + 1));
      o += 2;
      g.sigma_x = sigma_min + softplus(p(o++));
      g.sigma_y = sigma_min + softplus(p(o++));
      g.theta = p(o++);
    }
  }

  bool feasible(const Eigen::VectorXd& p) const {
    if (!p.allFinite()) return false;
    const int o0 = with_plane ? 3 : 0;
    for (int i = 0; i < n_gauss; ++i) {
      const int o = o0 + 6 * i;
      if (p(o + 1) < mu_lo_x || p(o + 1) > mu_hi_x || p(o + 2) < mu_lo_y || p(o + 2) > mu_hi_y) return false;
      if (sigma_min + softplus(p(o + 3)) > sigma_max || sigma_min + softplus(p(o + 4)) > sigma_max) return false;
    }
    return true;
  }
};

/// Residual (model - target) of the free parameters against a target field
/// and its Jacobian in solver coordinates.
void evaluate(const Parameterization& par, const Eigen::VectorXd& p, const Field& target, Eigen::VectorXd& r,
              Eigen::MatrixXd* jac) {
  PlaneModel plane;
  std::vector<GaussianParams> gs;
  par.unpack(p, plane, gs);
  const Eigen::Index n = static_cast<Eigen::Index>(target.size());
  r.resize(n);
  if (jac) jac->resize(n, par.size());

  std::vector<double> cs(gs.size()), sn(gs.size()), dsx(gs.size()), dsy(gs.size());
  const int o0 = par.with_plane ? 3 : 0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    cs[i] = std::cos(gs[i].theta);
    sn[i] = std::sin(gs[i].theta);
    dsx[i] = sigmoid(p(o0 + 6 * static_cast<int>(i) + 3));
    dsy[i] = sigmoid(p(o0 + 6 * static_cast<int>(i) + 4));
  }
  double grad[6];
  Eigen::Index row = 0;
  for (int y = 0; y < target.height; ++y) {
    for (int x = 0; x < target.width; ++x, ++row) {
      double m = par.with_plane ? plane.eval(x, y) : 0.0;
      if (jac && par.with_plane) {
        (*jac)(row, 0) = x;
        (*jac)(row, 1) = y;
        (*jac)(row, 2) = 1.0;
      }
      for (std::size_t i = 0; i < gs.size(); ++i) {
        m += gaussian_and_gradient(gs[i], cs[i], sn[i], x, y, jac ? grad : nullptr);
        if (jac) {
          const int o = o0 + 6 * static_cast<int>(i);
          (*jac)(row, o + 0) = grad[0];
          (*jac)(row, o + 1) = grad[1];
          (*jac)(row, o + 2) = grad[2];
          (*jac)(row, o + 3) = grad[3] * dsx[i];
          (*jac)(row, o + 4) = grad[4] * dsy[i];
          (*jac)(row, o + 5) = grad[5];
        }
      }
      r(row) = m - target.values[static_cast<std::size_t>(row)];
    }
  }
}

struct LmOutcome {
  int iterations = 0;
  bool converged = false;
};

/// Levenberg-Marquardt with Marquardt diagonal scaling. Only steps that stay
/// feasible and strictly lower the cost are accepted, so the returned cost
/// never exceeds the starting cost.
LmOutcome levenberg_marquardt(const Parameterization& par, Eigen::VectorXd& p, const Field& target,
                              const LmConfig& cfg) {
  LmOutcome out;
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  evaluate(par, p, target, r, &jac);
  double cost = r.squaredNorm();
  double lambda = cfg.lambda0;
  const int np = par.size();

  Eigen::MatrixXd a(np, np);
  Eigen::VectorXd g(np);
  Eigen::VectorXd r_new;
  bool need_normal = true;

  while (out.iterations < cfg.max_iter) {
    if (need_normal) {
      a.setZero();
      a.selfadjointView<Eigen::Lower>().rankUpdate(jac.transpose());
      a = a.selfadjointView<Eigen::Lower>();
      g.noalias() = jac.transpose() * r;
      need_normal = false;
    }
    if (cost == 0.0 || g.lpNorm<Eigen::Infinity>() <= 1e-300) {
      out.converged = true;
      break;
    }
    ++out.iterations;
    const double dmax = a.diagonal().maxCoeff();
    Eigen::MatrixXd m = a;
    for (int i = 0; i < np; ++i) m(i, i) += lambda * std::max(a(i, i), 1e-12 * dmax + 1e-300);
    const Eigen::VectorXd step = -m.ldlt().solve(g);
    if (!step.allFinite()) {
      lambda *= cfg.lambda_up;
      if (lambda > 1e16) {
        out.converged = true;
        break;
      }
      continue;
    }
    if (step.norm() <= cfg.step_tol * (1.0 + p.norm())) {
      out.converged = true;
      break;
    }
    const Eigen::VectorXd p_new = p + step;
    double cost_new = std::numeric_limits<double>::infinity();
    if (par.feasible(p_new)) {
      evaluate(par, p_new, target, r_new, nullptr);
      cost_new = r_new.squaredNorm();
    }
    if (cost_new < cost) {
      const double reduction = (cost - cost_new) / cost;
      p = p_new;
      evaluate(par, p, target, r, &jac);
      cost = cost_new;
      need_normal = true;
      lambda = std::max(lambda / cfg.lambda_down, 1e-12);
      if (reduction < cfg.ftol) {
        out.converged = true;
        break;
      }
    } else {
      lambda *= cfg.lambda_up;
      if (lambda > 1e16) {
        // No descent direction left at machine precision: a local minimum.
        out.converged = true;
        break;
      }
    }
  }
  return out;
}

Parameterization make_parameterization(const Field& f, const FitConfig& cfg, bool with_plane, int n_gauss) {
  Parameterization par;
  par.with_plane = with_plane;
  par.n_gauss = n_gauss;
  par.sigma_min = cfg.sigma_min;
  par.sigma_max = cfg.sigma_max > 0.0 ? cfg.sigma_max : std::hypot(f.width, f.height);
  // Grid box [0, w-1] x [0, h-1] scaled by 1.25 about its centre.
  const double ex = 0.125 * f.width;
  const double ey = 0.125 * f.height;
  par.mu_lo_x = -ex;
  par.mu_hi_x = (f.width - 1) + ex;
  par.mu_lo_y = -ey;
  par.mu_hi_y = (f.height - 1) + ey;
  return par;
}

double residual_stddev(const Field& res) {
  double mean = 0.0;
  for (double v : res.values) mean += v;
  mean /= static_cast<double>(res.size());
  double ss = 0.0;
  for (double v : res.values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(res.size()));
}

}  // namespace

Field channel_field(const PixelPatch& p, int channel) {
  Field f(p.width, p.height);
  f.values = p.channels[channel];
  return f;
}

GaussianParams normalize_gaussian(GaussianParams g) {
  if (g.sigma_y > g.sigma_x) {
    std::swap(g.sigma_x, g.sigma_y);
    g.theta += 0.5 * std::numbers::pi;
  }
  g.theta = wrap_theta(g.theta);
  return g;
}

Eigen::Matrix2d build_covariance(double sigma_x, double sigma_y, double theta) {
  if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) throw ParameterError("Gaussian sigmas must be positive");
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Eigen::Matrix2d rot;
  rot << c, -s, s, c;
  const Eigen::Matrix2d scale = Eigen::Vector2d(sigma_x, sigma_y).asDiagonal();
  Eigen::Matrix2d cov = rot * scale * scale.transpose() * rot.transpose();
  cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
  return cov;
}

double eval_gaussian(const GaussianParams& g, const Eigen::Vector2d& x) {
  return gaussian_and_gradient(g, std::cos(g.theta), std::sin(g.theta), x.x(), x.y(), nullptr);
}

Field eval_blemish(std::span<const GaussianParams> gs, int width, int height) {
  Field f(width, height);
  for (const auto& g : gs) {
    const double c = std::cos(g.theta);
    const double s = std::sin(g.theta);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) f.at(x, y) += gaussian_and_gradient(g, c, s, x, y, nullptr);
    }
  }
  return f;
}

Field eval_model(const PlaneModel& plane, std::span<const GaussianParams> gs, int width, int height) {
  Field f = eval_blemish(gs, width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) f.at(x, y) = plane.eval(x, y) + f.at(x, y);
  }
  return f;
}

ResidualJacobian residual_jacobian(const PlaneModel& plane, std::span<const GaussianParams> gs,
                                   const Field& observed) {
  const Eigen::Index n = static_cast<Eigen::Index>(observed.size());
  const int np = 3 + 6 * static_cast<int>(gs.size());
  ResidualJacobian out{Eigen::VectorXd(n), Eigen::MatrixXd(n, np)};
  std::vector<double> cs(gs.size()), sn(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    cs[i] = std::cos(gs[i].theta);
    sn[i] = std::sin(gs[i].theta);
  }
  double grad[6];
  Eigen::Index row = 0;
  for (int y = 0; y < observed.height; ++y) {
    for (int x = 0; x < observed.width; ++x, ++row) {
      double m = plane.eval(x, y);
      out.jacobian(row, 0) = x;
      out.jacobian(row, 1) = y;
      out.jacobian(row, 2) = 1.0;
      for (std::size_t i = 0; i < gs.size(); ++i) {
        m += gaussian_and_gradient(gs[i], cs[i], sn[i], x, y, grad);
        for (int k = 0; k < 6; ++k) out.jacobian(row, 3 + 6 * static_cast<Eigen::Index>(i) + k) = grad[k];
      }
      out.residual(row) = m - observed.values[static_cast<std::size_t>(row)];
    }
  }
  return out;
}

PlaneModel fit_plane(const Field& field) {
  const std::size_t n = field.size();
  if (n < 3 || field.width < 1 || field.height < 1) throw RankError("plane fit needs at least three samples");
  const double cx = 0.5 * (field.width - 1);
  const double cy = 0.5 * (field.height - 1);
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d atb = Eigen::Vector3d::Zero();
  for (int y = 0; y < field.height; ++y) {
    for (int x = 0; x < field.width; ++x) {
      const Eigen::Vector3d row(x - cx, y - cy, 1.0);
      ata += row * row.transpose();
      atb += row * field.at(x, y);
    }
  }
  // Samples on a single row or column leave one slope undetermined.
  if (field.width < 2 || field.height < 2) throw RankError("plane fit samples are collinear");
  const Eigen::Vector3d sol = ata.ldlt().solve(atb);
  PlaneModel plane;
  plane.k = Eigen::Vector2d(sol(0), sol(1));
  plane.d = sol(2) - sol(0) * cx - sol(1) * cy;
  return plane;
}

namespace {

ChannelFit fit_strided(const Field& field, const FitConfig& cfg, int stride) {
  Field sub((field.width + stride - 1) / stride, (field.height + stride - 1) / stride);
  for (int y = 0; y < sub.height; ++y) {
    for (int x = 0; x < sub.width; ++x) sub.at(x, y) = field.at(x * stride, y * stride);
  }
  const double s = stride;
  FitConfig sc = cfg;
  sc.sample_stride = 1;
  sc.init_sigma = cfg.init_sigma / s;
  sc.sigma_min = cfg.sigma_min / s;
  sc.sigma_max = cfg.sigma_max / s;
  ChannelFit fit = fit_incremental(sub, sc);
  fit.plane.k /= s;
  for (auto& g : fit.gaussians) {
    g.a *= s * s;
    g.mu *= s;
    g.sigma_x *= s;
    g.sigma_y *= s;
  }
  return fit;
}

}  // namespace

ChannelFit fit_incremental(const Field& field, const FitConfig& cfg) {
  if (field.width < Roi::kMinSide || field.height < Roi::kMinSide) {
    throw ParameterError("fit field must be at least 8x8");
  }
  if (cfg.sample_stride < 1) throw ParameterError("sample stride must be >= 1");
  int stride = std::min(cfg.sample_stride, std::min(field.width, field.height) / Roi::kMinSide);
  if (stride > 1) {
    while ((field.width + stride - 1) / stride < Roi::kMinSide || (field.height + stride - 1) / stride < Roi::kMinSide) {
      --stride;
    }
  }
  if (stride > 1) return fit_strided(field, cfg, stride);
  if (cfg.max_gaussians < 0 || !(cfg.init_sigma > cfg.sigma_min) || !(cfg.sigma_min > 0.0)) {
    throw ParameterError("invalid fit configuration");
  }
  ChannelFit fit;
  fit.plane = fit_plane(field);

  Field fixed = eval_model(fit.plane, {}, field.width, field.height);
  Field res(field.width, field.height);
  auto update_residual = [&] {
    for (std::size_t i = 0; i < res.size(); ++i) res.values[i] = field.values[i] - fixed.values[i];
  };
  update_residual();
  double rms_prev = 0.0;
  for (double v : res.values) rms_prev += v * v;
  rms_prev = std::sqrt(rms_prev / static_cast<double>(res.size()));
  fit.plane_rms = rms_prev;

  const Parameterization single = make_parameterization(field, cfg, false, 1);
  while (static_cast<int>(fit.gaussians.size()) < cfg.max_gaussians && rms_prev > 0.0) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < res.size(); ++i) {
      if (std::abs(res.values[i]) > std::abs(res.values[arg])) arg = i;
    }
    const double peak = res.values[arg];
    const double threshold = std::max(cfg.amp_threshold_sigmas * residual_stddev(res), cfg.amp_threshold_floor);
    if (!(std::abs(peak) > threshold)) break;

    GaussianParams seed;
    seed.a = peak * kTwoPi * cfg.init_sigma * cfg.init_sigma;
    seed.mu = Eigen::Vector2d(static_cast<double>(arg % field.width), static_cast<double>(arg / field.width));
    seed.sigma_x = seed.sigma_y = cfg.init_sigma;
    seed.theta = 0.0;

    Eigen::VectorXd p = single.pack(PlaneModel{}, std::span(&seed, 1));
    const LmOutcome lm = levenberg_marquardt(single, p, res, cfg.lm);
    fit.iterations += lm.iterations;
    Eigen::VectorXd r;
    evaluate(single, p, res, r, nullptr);
    const double rms_new = rms_of(r);
    PlaneModel unused;
    std::vector<GaussianParams> gs;
    single.unpack(p, unused, gs);
    std::vector<GaussianParams> trial = fit.gaussians;
    trial.push_back(gs[0]);
    PlaneModel trial_plane = fit.plane;
    double rms_trial = rms_new;
    {
      const Parameterization joint = make_parameterization(field, cfg, true, static_cast<int>(trial.size()));
      Eigen::VectorXd q = joint.pack(trial_plane, trial);
      const LmOutcome jl = levenberg_marquardt(joint, q, field, cfg.lm);
      fit.iterations += jl.iterations;
      Eigen::VectorXd rq;
      evaluate(joint, q, field, rq, nullptr);
      if (rms_of(rq) <= rms_new) {
        joint.unpack(q, trial_plane, trial);
        rms_trial = rms_of(rq);
      }
    }
    if ((rms_prev - rms_trial) / rms_prev < cfg.rel_tol) break;

    fit.gaussians = std::move(trial);
    fit.plane = trial_plane;
    fixed = eval_model(fit.plane, fit.gaussians, field.width, field.height);
    update_residual();
    rms_prev = rms_trial;
  }
  fit.greedy_rms = rms_prev;
  fit.rms = rms_prev;
  fit.converged = true;

  if (!fit.gaussians.empty()) {
    const Parameterization joint =
        make_parameterization(field, cfg, true, static_cast<int>(fit.gaussians.size()));
    Eigen::VectorXd p = joint.pack(fit.plane, fit.gaussians);
    const LmOutcome lm = levenberg_marquardt(joint, p, field, cfg.lm);
    fit.iterations += lm.iterations;
    fit.converged = lm.converged;
    joint.unpack(p, fit.plane, fit.gaussians);
    Eigen::VectorXd r;
    evaluate(joint, p, field, r, nullptr);
    fit.rms = std::min(rms_of(r), fit.greedy_rms);
  }
  for (auto& g : fit.gaussians) g = normalize_gaussian(g);
  return fit;
}

BlemishFit fit_blemish(const PixelPatch& base, const FitConfig& cfg) {
  require_space(base, Space::Chromophore, "fit_blemish");
  BlemishFit out;
  out.width = base.width;
  out.height = base.height;
  for (int k = 0; k < 3; ++k) out.channels[k] = fit_incremental(channel_field(base, k), cfg);
  return out;
}

namespace {

constexpr const char* kChannelNames[3] = {"H", "M", "r"};

std::string channel_json(const ChannelFit& c) {
  using detail::fmt17;
  std::string s = "{\"plane\":{\"k\":[" + fmt17(c.plane.k.x()) + "," + fmt17(c.plane.k.y()) +
                  "],\"d\":" + fmt17(c.plane.d) + "},\"gaussians\":[";
  for (std::size_t i = 0; i < c.gaussians.size(); ++i) {
    const auto& g = c.gaussians[i];
    if (i) s += ',';
    s += "{\"a\":" + fmt17(g.a) + ",\"mu\":[" + fmt17(g.mu.x()) + "," + fmt17(g.mu.y()) + "],\"sigma\":[" +
         fmt17(g.sigma_x) + "," + fmt17(g.sigma_y) + "],\"theta\":" + fmt17(g.theta) + "}";
  }
  s += "],\"rms\":" + fmt17(c.rms) + ",\"plane_rms\":" + fmt17(c.plane_rms) + ",\"greedy_rms\":" +
       fmt17(c.greedy_rms) + ",\"iterations\":" + std::to_string(c.iterations) +
       ",\"converged\":" + (c.converged ? "true" : "false") + "}";
  return s;
}

}  // namespace

std::string BlemishFit::to_json() const {
  std::string s = "{\"width\":" + std::to_string(width) + ",\"height\":" + std::to_string(height) +
                  ",\"channels\":{";
  for (int k = 0; k < 3; ++k) {
    if (k) s += ',';
    s += std::string("\"") + kChannelNames[k] + "\":" + channel_json(channels[k]);
  }
  s += "}}";
  return s;
}

BlemishFit BlemishFit::from_json(const std::string& text) {
  BlemishFit out;
  try {
    const auto j = nlohmann::json::parse(text);
    out.width = j.at("width").get<int>();
    out.height = j.at("height").get<int>();
    for (int k = 0; k < 3; ++k) {
      const auto& c = j.at("channels").at(kChannelNames[k]);
      ChannelFit& cf = out.channels[k];
      cf.plane.k = Eigen::Vector2d(c.at("plane").at("k").at(0).get<double>(), c.at("plane").at("k").at(1).get<double>());
      cf.plane.d = c.at("plane").at("d").get<double>();
      for (const auto& g : c.at("gaussians")) {
        GaussianParams gp;
        gp.a = g.at("a").get<double>();
        gp.mu = Eigen::Vector2d(g.at("mu").at(0).get<double>(), g.at("mu").at(1).get<double>());
        gp.sigma_x = g.at("sigma").at(0).get<double>();
        gp.sigma_y = g.at("sigma").at(1).get<double>();
        gp.theta = g.at("theta").get<double>();
        cf.gaussians.push_back(gp);
      }
      cf.rms = c.at("rms").get<double>();
      cf.plane_rms = c.value("plane_rms", cf.rms);
      cf.greedy_rms = c.value("greedy_rms", cf.rms);
      cf.iterations = c.value("iterations", 0);
      cf.converged = c.value("converged", true);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ParameterError(std::string("blemish fit JSON: ") + ex.what());
  }
  return out;
}

}  // namespace chromofit
