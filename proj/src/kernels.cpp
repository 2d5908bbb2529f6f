#include "kernels.hpp"

#include <Eigen/Dense>
#include <limits>

#include "adaptlab/error.hpp"

namespace adaptlab::detail {

namespace {

using Array = Eigen::Array<double, Eigen::Dynamic, 1>;
using ConstVec = Eigen::Map<const Array>;
using MutVec = Eigen::Map<Array>;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using ConstHead = Eigen::Map<const RowMajor, 0, Stride>;
using MutHead = Eigen::Map<RowMajor, 0, Stride>;

ConstVec flat(const Tensor2D& t) { return ConstVec(t.data(), static_cast<Eigen::Index>(t.size())); }
MutVec flat(Tensor2D& t) { return MutVec(t.data(), static_cast<Eigen::Index>(t.size())); }

ConstHead head(const Tensor2D& t, std::size_t row0, std::size_t len, std::size_t h, std::size_t dh) {
  return ConstHead(t.data() + row0 * t.cols() + h * dh, static_cast<Eigen::Index>(len),
                   static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(t.cols())));
}
MutHead head(Tensor2D& t, std::size_t row0, std::size_t len, std::size_t h, std::size_t dh) {
  return MutHead(t.data() + row0 * t.cols() + h * dh, static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(dh),
                 Stride(static_cast<Eigen::Index>(t.cols())));
}

void check_segments(const Tensor2D& q, std::span<const std::size_t> segments) {
  std::size_t total = 0;
  for (std::size_t len : segments) total += len;
  if (total != q.rows()) throw ShapeError("attention: segment lengths do not cover the rows");
}

}  // namespace

// tanh(u) = 1 - 2 / (exp(2u) + 1) keeps the packet exp path.
void gelu_forward(const Tensor2D& pre, Tensor2D& act, Tensor2D& tanh_out) {
  act = Tensor2D(pre.rows(), pre.cols());
  tanh_out = Tensor2D(pre.rows(), pre.cols());
  auto x = flat(pre);
  Array u = kGeluC * (x + 0.044715 * x.cube());
  Array t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
  flat(tanh_out) = t;
  flat(act) = 0.5 * x * (1.0 + t);
}

void gelu_backward(const Tensor2D& pre, const Tensor2D& tanh_cached, Tensor2D& grad) {
  auto x = flat(pre);
  auto t = flat(tanh_cached);
  Array du = kGeluC * (1.0 + 3.0 * 0.044715 * x.square());
  flat(grad) *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * du;
}

void causal_attention_forward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t n_heads,
                              std::span<const std::size_t> segments, Tensor2D& ctx, std::vector<Tensor2D>* probs) {
  check_segments(q, segments);
  const std::size_t dh = q.cols() / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ctx = Tensor2D(q.rows(), q.cols());
  if (probs != nullptr) probs->clear();
  std::size_t row0 = 0;
  for (std::size_t n : segments) {
    RowMajor s(n, n);
    for (std::size_t h = 0; h < n_heads; ++h) {
      s.noalias() = head(q, row0, n, h, dh) * head(k, row0, n, h, dh).transpose();
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, s(i, j) * scale);
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) * scale - mx);
          total += s(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) s(i, j) /= total;
        for (std::size_t j = i + 1; j < n; ++j) s(i, j) = 0.0;
      }
      head(ctx, row0, n, h, dh).noalias() = s * head(v, row0, n, h, dh);
      if (probs != nullptr) {
        Tensor2D p(n, n);
        std::copy(s.data(), s.data() + s.size(), p.data());
        probs->push_back(std::move(p));
      }
    }
    row0 += n;
  }
}

void causal_attention_backward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                               const std::vector<Tensor2D>& probs, const Tensor2D& d_ctx, std::size_t n_heads,
                               std::span<const std::size_t> segments, Tensor2D& dq, Tensor2D& dk, Tensor2D& dv) {
  check_segments(q, segments);
  const std::size_t dh = q.cols() / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Tensor2D(q.rows(), q.cols());
  dk = Tensor2D(q.rows(), q.cols());
  dv = Tensor2D(q.rows(), q.cols());
  std::size_t row0 = 0;
  std::size_t slot = 0;
  for (std::size_t n : segments) {
    RowMajor dp(n, n);
    for (std::size_t h = 0; h < n_heads; ++h, ++slot) {
      Eigen::Map<const RowMajor> p(probs[slot].data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      head(dv, row0, n, h, dh).noalias() = p.transpose() * head(d_ctx, row0, n, h, dh);
      dp.noalias() = head(d_ctx, row0, n, h, dh) * head(v, row0, n, h, dh).transpose();
      for (std::size_t i = 0; i < n; ++i) {
        double row_dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) row_dot += p(i, j) * dp(i, j);
        for (std::size_t j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - row_dot) * scale;
        for (std::size_t j = i + 1; j < n; ++j) dp(i, j) = 0.0;
      }
      head(dq, row0, n, h, dh).noalias() = dp * head(k, row0, n, h, dh);
      head(dk, row0, n, h, dh).noalias() = dp.transpose() * head(q, row0, n, h, dh);
    }
    row0 += n;
  }
}

}  // namespace adaptlab::detail
