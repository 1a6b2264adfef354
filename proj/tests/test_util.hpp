#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace psup::test {

inline Eigen::VectorXd white_noise(Eigen::Index n, unsigned seed, double amplitude = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, amplitude);
  Eigen::VectorXd x(n);
  for (auto& v : x) v = dist(rng);
  return x;
}

inline Eigen::VectorXd sine(Eigen::Index n, double hz, double amplitude = 0.5, double rate = 44100.0) {
  Eigen::VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * i / rate);
  return x;
}

inline double rms(const Eigen::VectorXd& x) { return std::sqrt(x.squaredNorm() / x.size()); }

inline double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / std::sqrt(a.squaredNorm() * b.squaredNorm());
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class Derived>
double median_of(const Eigen::DenseBase<Derived>& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) v.push_back(static_cast<double>(m(i, j)));
  return median(std::move(v));
}

}  // namespace psup::test
