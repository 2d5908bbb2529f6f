#pragma once

// Independent oracles and generators for the test suites. Nothing here calls
// into the implementation paths being checked beyond plain accessors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "adaptlab/numerics.hpp"

namespace testutil {

using adaptlab::Tensor2D;

inline Tensor2D random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor2D t(r, c);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

inline Tensor2D naive_matmul(const Tensor2D& a, const Tensor2D& b) {
  Tensor2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// Central differences of f w.r.t. every entry of `x` (restored afterwards).
inline Tensor2D finite_difference(Tensor2D& x, const std::function<double()>& f, double h = 1e-4) {
  Tensor2D g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.values()[i];
    x.values()[i] = orig + h;
    const double plus = f();
    x.values()[i] = orig - h;
    const double minus = f();
    x.values()[i] = orig;
    g.values()[i] = (plus - minus) / (2.0 * h);
  }
  return g;
}

// Entrywise relative error with an absolute floor on the denominator, so
// entries whose true gradient is ~0 are judged on absolute error instead.
inline double max_relative_error(const Tensor2D& analytic, const Tensor2D& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.values()[i];
    const double n = numeric.values()[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

// Largest singular value by power iteration on W^T W.
inline double spectral_norm(const Tensor2D& w, int iters = 500) {
  std::vector<double> v(w.cols(), 1.0);
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    std::vector<double> u(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) u[r] += w(r, c) * v[c];
    std::vector<double> nv(w.cols(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) nv[c] += w(r, c) * u[r];
    double n = 0.0;
    for (double x : nv) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) return 0.0;
    for (std::size_t c = 0; c < nv.size(); ++c) v[c] = nv[c] / n;
    sigma = std::sqrt(n);
  }
  return sigma;
}

// Column-by-column mean difference and ranking by sorting (-|s_j|, j) pairs.
struct BruteMmd {
  std::vector<double> scores;
  std::vector<std::size_t> ranking;
};

inline BruteMmd brute_force_mmd(const Tensor2D& x, const std::vector<int>& labels) {
  BruteMmd out;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double pos = 0.0, neg = 0.0;
    std::size_t np = 0, nn = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (labels[i] == 1) {
        pos += x(i, j);
        ++np;
      } else {
        neg += x(i, j);
        ++nn;
      }
    }
    out.scores.push_back(pos / static_cast<double>(np) - neg / static_cast<double>(nn));
  }
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t j = 0; j < out.scores.size(); ++j) keyed.emplace_back(-std::abs(out.scores[j]), j);
  std::sort(keyed.begin(), keyed.end());
  for (const auto& [key, j] : keyed) out.ranking.push_back(j);
  return out;
}

}  // namespace testutil
