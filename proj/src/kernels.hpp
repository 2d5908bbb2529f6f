#pragma once

// Row-wise kernels shared by the model and adapter translation units.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "adaptlab/numerics.hpp"

namespace adaptlab::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct NormCache {
  Tensor2D xhat;             // N x d
  std::vector<double> rstd;  // N
};

// y = (x - mean) * rstd * gain + bias, per row.
inline Tensor2D layer_norm(const Tensor2D& x, const Tensor2D& gain, const Tensor2D& bias,
                           NormCache* cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Tensor2D y(n, d);
  if (cache != nullptr) {
    cache->xhat = Tensor2D(n, d);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    auto yr = y.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * rstd;
      yr[j] = xh * gain(0, j) + bias(0, j);
      if (cache != nullptr) cache->xhat(r, j) = xh;
    }
    if (cache != nullptr) cache->rstd[r] = rstd;
  }
  return y;
}

// Accumulates gain/bias grads when the sinks are non-null; returns dx.
inline Tensor2D layer_norm_backward(const Tensor2D& dy, const Tensor2D& gain, const NormCache& cache,
                                    Tensor2D* dgain, Tensor2D* dbias) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Tensor2D dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dy(r, j) * gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * cache.xhat(r, j);
      if (dgain != nullptr) (*dgain)(0, j) += dy(r, j) * cache.xhat(r, j);
      if (dbias != nullptr) (*dbias)(0, j) += dy(r, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(r, j) = cache.rstd[r] * (dxhat[j] - mean_dxhat - cache.xhat(r, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Elementwise over whole tensors; `tanh_out` keeps the inner tanh for the backward pass.
void gelu_forward(const Tensor2D& pre, Tensor2D& act, Tensor2D& tanh_out);
// grad *= gelu'(pre), reusing the cached tanh.
void gelu_backward(const Tensor2D& pre, const Tensor2D& tanh_cached, Tensor2D& grad);

// Multi-head causal attention over the rows of q, k, v (each N x d). Rows are
// split into independent sequences of the given lengths; `probs` holds one
// len x len matrix per (sequence, head).
void causal_attention_forward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t n_heads,
                              std::span<const std::size_t> segments, Tensor2D& ctx, std::vector<Tensor2D>* probs);
void causal_attention_backward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                               const std::vector<Tensor2D>& probs, const Tensor2D& d_ctx, std::size_t n_heads,
                               std::span<const std::size_t> segments, Tensor2D& dq, Tensor2D& dk, Tensor2D& dv);

inline void add_row_bias(Tensor2D& x, const Tensor2D& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < x.cols(); ++j) row[j] += bias(0, j);
  }
}

inline void add_into(Tensor2D& dst, const Tensor2D& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline void scale_inplace(Tensor2D& x, double s) {
  for (double& v : x.values()) v *= s;
}

inline void sum_rows_into(Tensor2D& dst, const Tensor2D& src) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(0, j) += src(r, j);
}

inline Tensor2D row_vector(std::span<const double> v) {
  return Tensor2D(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

}  // namespace adaptlab::detail
