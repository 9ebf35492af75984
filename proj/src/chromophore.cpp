#include "chromofit/chromophore.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <json.hpp>

#include "chromofit/errors.hpp"
#include "json_format.hpp"

namespace chromofit {

namespace {

bool all_finite(const Eigen::Matrix3d& m) { return m.allFinite(); }

Eigen::Matrix3d symmetric_decorrelation(const Eigen::Matrix3d& w) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(w * w.transpose());
  const Eigen::Vector3d inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

}  // namespace

MixingMatrix::MixingMatrix(const Eigen::Matrix3d& e, std::uint64_t seed) : e_(e), seed_(seed) {
  if (!all_finite(e)) throw ParameterError("mixing matrix has non-finite entries");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e);
  const auto& s = svd.singularValues();
  if (!(s(2) > 0.0) || s(0) / s(2) >= kMaxCondition) {
    throw ParameterError("mixing matrix is singular or ill-conditioned (condition number >= 1e6)");
  }
  inv_ = e.inverse();
}

double MixingMatrix::condition_number() const {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e_);
  return svd.singularValues()(0) / svd.singularValues()(2);
}

std::string MixingMatrix::to_json() const {
  std::string s = R"({"channels":["R","G","B"],"chromophores":["H","M","r"],"e":[)";
  for (int i = 0; i < 3; ++i) {
    s += '[';
    for (int j = 0; j < 3; ++j) {
      s += detail::fmt17(e_(i, j));
      if (j < 2) s += ',';
    }
    s += ']';
    if (i < 2) s += ',';
  }
  s += R"(],"seed":)" + std::to_string(seed_) + "}";
  return s;
}

MixingMatrix MixingMatrix::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ParameterError(std::string("mixing matrix JSON: ") + ex.what());
  }
  if (!j.is_object() || !j.contains("e")) throw ParameterError("mixing matrix JSON: missing \"e\"");
  if (j.contains("channels") && j["channels"] != nlohmann::json({"R", "G", "B"})) {
    throw ParameterError("mixing matrix JSON: channels must be [\"R\",\"G\",\"B\"]");
  }
  if (j.contains("chromophores") && j["chromophores"] != nlohmann::json({"H", "M", "r"})) {
    throw ParameterError("mixing matrix JSON: chromophores must be [\"H\",\"M\",\"r\"]");
  }
  const auto& rows = j["e"];
  if (!rows.is_array() || rows.size() != 3) throw ParameterError("mixing matrix JSON: \"e\" must be 3x3");
  Eigen::Matrix3d e;
  for (int i = 0; i < 3; ++i) {
    if (!rows[i].is_array() || rows[i].size() != 3) throw ParameterError("mixing matrix JSON: \"e\" must be 3x3");
    for (int k = 0; k < 3; ++k) {
      if (!rows[i][k].is_number()) throw ParameterError("mixing matrix JSON: non-numeric entry");
      e(i, k) = rows[i][k].get<double>();
    }
  }
  const std::uint64_t seed = j.value("seed", std::uint64_t{42});
  return MixingMatrix(e, seed);
}

const MixingMatrix& default_mixing_matrix() {
  // Columns H, M, r over rows R, G, B: haemoglobin peaks in green, melanin
  // rises toward blue, the residual is nearly flat.
  static const MixingMatrix m = [] {
    Eigen::Matrix3d e;
    e << 0.10, 0.25, 0.35,
         0.55, 0.40, 0.30,
         0.35, 0.60, 0.30;
    return MixingMatrix(e, 42);
  }();
  return m;
}

Eigen::Matrix3d canonicalize_columns(const Eigen::Matrix3d& mixing, std::span<const ChromophoreSample> samples) {
  Eigen::Matrix3d a = mixing;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& s : samples) mean += s;
  if (!samples.empty()) mean /= static_cast<double>(samples.size());
  const Eigen::Vector3d mean_c = a.inverse() * mean;
  for (int k = 0; k < 3; ++k) {
    if (mean_c(k) < 0.0) a.col(k) = -a.col(k);
  }

  auto l1 = [&](int k) { return std::max(a.col(k).cwiseAbs().sum(), 1e-300); };
  auto monotone_score = [&](int k) {
    const Eigen::Vector3d v = a.col(k);
    return std::min(v(1) - v(0), v(2) - v(1)) / l1(k);
  };
  auto green_score = [&](int k) { return a(1, k) / l1(k); };

  int mel = 0;
  for (int k = 1; k < 3; ++k) {
    if (monotone_score(k) > monotone_score(mel)) mel = k;
  }
  int rest[2];
  for (int k = 0, n = 0; k < 3; ++k) {
    if (k != mel) rest[n++] = k;
  }
  const int hb = green_score(rest[1]) > green_score(rest[0]) ? rest[1] : rest[0];
  const int res = hb == rest[0] ? rest[1] : rest[0];

  Eigen::Matrix3d out;
  out.col(kChanH) = a.col(hb);
  out.col(kChanM) = a.col(mel);
  out.col(kChanR) = a.col(res);
  return out;
}

MixingMatrix estimate_mixing_matrix(std::span<const ChromophoreSample> samples, const IcaConfig& cfg,
                                    IcaReport* report) {
  const std::size_t n = samples.size();
  if (n < IcaConfig::kMinSamples) {
    throw DegenerateSamplesError("FastICA needs at least 1000 samples, got " + std::to_string(n));
  }
  if (!(cfg.tol > 0.0) || cfg.max_iter < 1) throw ParameterError("invalid ICA tolerance or iteration limit");

  Eigen::Matrix<double, 3, Eigen::Dynamic> x(3, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (!samples[i].allFinite()) throw DegenerateSamplesError("non-finite sample");
    x.col(static_cast<Eigen::Index>(i)) = samples[i];
  }
  const Eigen::Vector3d mean = x.rowwise().mean();
  x.colwise() -= mean;

  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Matrix3d cov = (x * x.transpose()) * inv_n;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const Eigen::Vector3d evals = es.eigenvalues();
  if (!(evals(2) > 0.0) || evals(0) <= 1e-12 * evals(2)) {
    throw DegenerateSamplesError("sample covariance is rank deficient");
  }
  const Eigen::Matrix3d whiten = evals.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  const Eigen::Matrix3d dewhiten = es.eigenvectors() * evals.cwiseSqrt().asDiagonal();
  const Eigen::Matrix<double, 3, Eigen::Dynamic> z = whiten * x;

  const double white_err = ((z * z.transpose()) * inv_n - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (white_err > 1e-8) throw Error("whitening failed: covariance deviates from identity by " + std::to_string(white_err));

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Matrix3d w;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) w(i, k) = normal(rng);
  }
  w = symmetric_decorrelation(w);

  int it = 0;
  bool converged = false;
  Eigen::Matrix<double, 3, Eigen::Dynamic> g(3, z.cols());
  while (it < cfg.max_iter) {
    ++it;
    g = (w * z).array().tanh().matrix();
    const Eigen::Vector3d g_prime_mean = (1.0 - g.array().square()).rowwise().mean();
    Eigen::Matrix3d w_next = (g * z.transpose()) * inv_n - g_prime_mean.asDiagonal() * w;
    w_next = symmetric_decorrelation(w_next);
    const double lim = ((w_next * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = w_next;
    if (lim < cfg.tol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw ConvergenceError("FastICA did not converge within " + std::to_string(cfg.max_iter) + " iterations", it);
  }
  if (report) {
    report->iterations = it;
    report->whitening_error = white_err;
  }

  const Eigen::Matrix3d mixing = dewhiten * w.transpose();
  return MixingMatrix(canonicalize_columns(mixing, samples), cfg.seed);
}

std::vector<ChromophoreSample> collect_samples(const PixelPatch& p, std::size_t max_samples,
                                               std::optional<std::span<const std::uint8_t>> mask) {
  require_space(p, Space::LogAbsorption, "collect_samples");
  if (mask && mask->size() != p.size()) throw DimensionError("sample mask size does not match patch");
  if (max_samples == 0) throw ParameterError("max_samples must be positive");
  std::vector<std::size_t> idx;
  idx.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!mask || (*mask)[i] != 0) idx.push_back(i);
  }
  const std::size_t stride = (idx.size() + max_samples - 1) / max_samples;
  std::vector<ChromophoreSample> out;
  out.reserve(idx.size() / std::max<std::size_t>(stride, 1) + 1);
  for (std::size_t j = 0; j < idx.size(); j += std::max<std::size_t>(stride, 1)) {
    const std::size_t i = idx[j];
    out.emplace_back(p.channels[0][i], p.channels[1][i], p.channels[2][i]);
  }
  return out;
}

PixelPatch to_chromophore(const PixelPatch& p, const MixingMatrix& e) {
  require_space(p, Space::LogAbsorption, "to_chromophore");
  PixelPatch out = p.like();
  out.space = Space::Chromophore;
  const Eigen::Matrix3d& inv = e.inverse();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Eigen::Vector3d a(p.channels[0][i], p.channels[1][i], p.channels[2][i]);
    const Eigen::Vector3d c = inv * a;
    for (int k = 0; k < 3; ++k) out.channels[k][i] = c(k);
  }
  return out;
}

PixelPatch from_chromophore(const PixelPatch& p, const MixingMatrix& e, ClampCounts* clamped) {
  require_space(p, Space::Chromophore, "from_chromophore");
  PixelPatch out = p.like();
  out.space = Space::LogAbsorption;
  const Eigen::Matrix3d& m = e.matrix();
  ClampCounts counts;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Eigen::Vector3d c(p.channels[0][i], p.channels[1][i], p.channels[2][i]);
    const Eigen::Vector3d a = m * c;
    for (int k = 0; k < 3; ++k) {
      if (a(k) < 0.0) {
        out.channels[k][i] = 0.0;
        ++counts.per_channel[k];
      } else {
        out.channels[k][i] = a(k);
      }
    }
  }
  if (clamped) *clamped += counts;
  return out;
}

}  // namespace chromofit
