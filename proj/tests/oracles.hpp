#pragma once

// Reference computations shared by unit and acceptance tests. Each one is
// written independently of the library code it checks.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace hiermem::oracle {

inline double normal_pdf(double x, double m, double v) {
  return std::exp(-0.5 * (x - m) * (x - m) / v) / std::sqrt(2.0 * std::numbers::pi * v);
}

/// 1-D KL(N(mq,vq) || N(mp,vp)) by composite Simpson integration of q log(q/p).
inline double kl_quadrature(double mq, double vq, double mp, double vp, int intervals = 20000) {
  const double s = std::sqrt(vq);
  const double a = mq - 14.0 * s, b = mq + 14.0 * s;
  const double h = (b - a) / intervals;
  auto f = [&](double x) {
    const double q = normal_pdf(x, mq, vq);
    if (q <= 0.0) return 0.0;
    // log(q/p) written out so underflow of p never produces inf.
    const double log_ratio = -0.5 * std::log(vq / vp) - 0.5 * (x - mq) * (x - mq) / vq +
                             0.5 * (x - mp) * (x - mp) / vp;
    return q * log_ratio;
  };
  double acc = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return acc * h / 3.0;
}

/// Sample mean and standard deviation (n - 1 denominator).
inline void mean_sd(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx, sx, my, sy;
  mean_sd(rx, mx, sx);
  mean_sd(ry, my, sy);
  if (sx == 0.0 || sy == 0.0) return 0.0;
  double c = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) c += (rx[i] - mx) * (ry[i] - my);
  return c / static_cast<double>(rx.size() - 1) / (sx * sy);
}

}  // namespace hiermem::oracle
