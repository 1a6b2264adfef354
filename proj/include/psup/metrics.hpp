#pragma once

// Objective metrics: best-of-K parameter error and Frechet distance between
// pools of PS parameter frames.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "psup/errors.hpp"
#include "psup/ps_codec.hpp"

namespace psup {

struct MetricConfig {
  int k = 128;
  double lambda = 0.15;
  double eps_db = 20.0;
  bool raw_sum = false;  // sum over elements instead of mean

  void validate() const {
    if (k < 1) throw ConfigError("K must be >= 1");
    if (!(lambda >= 0.0) || !(eps_db > 0.0)) throw ConfigError("metric lambda/eps out of range");
  }
};

enum class ParamKind { kIid, kIc };

inline double delta(double x, double y, ParamKind kind, const MetricConfig& cfg = {}) {
  if (kind == ParamKind::kIc) return std::abs(x - y);
  const double cx = std::clamp(x, -cfg.eps_db, cfg.eps_db);
  const double cy = std::clamp(y, -cfg.eps_db, cfg.eps_db);
  return cfg.lambda * std::abs(cx - cy);
}

/// Mean (or sum) of delta over all bands and frames.
inline double param_error(const PsParams& truth, const PsParams& est, const MetricConfig& cfg = {}) {
  if (truth.iid.rows() != est.iid.rows() || truth.iid.cols() != est.iid.cols() || truth.ic.rows() != est.ic.rows() ||
      truth.ic.cols() != est.ic.cols()) {
    throw ShapeError("param_error: shape mismatch");
  }
  double sum = 0.0;
  for (Eigen::Index i = 0; i < truth.iid.size(); ++i) {
    sum += delta(truth.iid.data()[i], est.iid.data()[i], ParamKind::kIid, cfg);
  }
  for (Eigen::Index i = 0; i < truth.ic.size(); ++i) {
    sum += delta(truth.ic.data()[i], est.ic.data()[i], ParamKind::kIc, cfg);
  }
  const auto n = static_cast<double>(truth.iid.size() + truth.ic.size());
  return cfg.raw_sum || n == 0.0 ? sum : sum / n;
}

inline double e_min(const PsParams& truth, const std::vector<PsParams>& samples, const MetricConfig& cfg = {}) {
  if (samples.empty()) throw DataError("e_min needs at least one sample");
  double best = std::numeric_limits<double>::infinity();
  for (const PsParams& s : samples) best = std::min(best, param_error(truth, s, cfg));
  return best;
}

/// Stack parameter sets into a frames x (2 * bands) pool.
inline Eigen::MatrixXd frame_pool(const std::vector<PsParams>& sets) {
  Eigen::Index rows = 0, dim = -1;
  for (const PsParams& p : sets) {
    if (dim >= 0 && 2 * p.bands() != dim) throw ShapeError("frame_pool: band count differs");
    dim = 2 * p.bands();
    rows += p.frames();
  }
  Eigen::MatrixXd pool(rows, std::max<Eigen::Index>(dim, 0));
  Eigen::Index r = 0;
  for (const PsParams& p : sets) {
    pool.middleRows(r, p.frames()) = p.joined().transpose();
    r += p.frames();
  }
  return pool;
}

namespace detail {

// Symmetric PSD square root; eigenvalues below the floor count as zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a, double floor = 1e-10) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd ev = es.eigenvalues().unaryExpr([floor](double v) { return v < floor ? 0.0 : std::sqrt(v); });
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double psd_sqrt_trace(const Eigen::MatrixXd& a, double floor = 1e-10) {
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a, Eigen::EigenvaluesOnly).eigenvalues();
  double t = 0.0;
  for (double v : ev) t += v < floor ? 0.0 : std::sqrt(v);
  return t;
}

inline void mean_cov(const Eigen::MatrixXd& pool, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = pool.colwise().mean().transpose();
  const Eigen::MatrixXd c = pool.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(pool.rows() - 1);
}

}  // namespace detail

/// Rows are frames, columns parameters.
inline double frechet(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw DataError("frechet needs at least two frames per pool");
  if (a.cols() != b.cols()) throw ShapeError("frechet: pools differ in dimension");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  detail::mean_cov(a, mu_a, cov_a);
  detail::mean_cov(b, mu_b, cov_b);
  const Eigen::MatrixXd s = detail::psd_sqrt(cov_a);
  const Eigen::MatrixXd m = s * cov_b * s;
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() -
                   2.0 * detail::psd_sqrt_trace(0.5 * (m + m.transpose()));
  return std::max(d, 0.0);
}

struct EvalRow {
  std::string excerpt;
  std::string approach;
  double e_min = 0.0;
  double d_f = 0.0;
};

/// CSV with one row per (excerpt, approach), a `mean` row per approach and, when
/// given, a `pooled` row carrying D_F over all excerpts' frames.
inline void write_eval_csv(std::ostream& os, const std::vector<EvalRow>& rows,
                           const std::map<std::string, double>& pooled_df = {}) {
  os << "excerpt,approach,e_min,d_f\n";
  os.precision(8);
  std::vector<std::string> order;
  std::map<std::string, std::pair<double, double>> sums;
  std::map<std::string, int> counts;
  for (const EvalRow& r : rows) {
    os << r.excerpt << ',' << r.approach << ',' << r.e_min << ',' << r.d_f << '\n';
    if (counts[r.approach]++ == 0) order.push_back(r.approach);
    sums[r.approach].first += r.e_min;
    sums[r.approach].second += r.d_f;
  }
  for (const std::string& a : order) {
    const double n = counts[a];
    os << "mean," << a << ',' << sums[a].first / n << ',' << sums[a].second / n << '\n';
  }
  for (const std::string& a : order) {
    if (const auto it = pooled_df.find(a); it != pooled_df.end()) {
      os << "pooled," << a << ',' << sums[a].first / counts[a] << ',' << it->second << '\n';
    }
  }
}

}  // namespace psup
