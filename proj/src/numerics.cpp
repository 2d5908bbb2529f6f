#include "adaptlab/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "adaptlab/error.hpp"

namespace adaptlab {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Tensor2D& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap view(Tensor2D& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor2D& a, const Tensor2D& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor2D

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Tensor2D::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor2D(r, c, std::move(data));
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

std::string Tensor2D::shape_string() const {
  std::ostringstream os;
  os << "[" << rows_ << "x" << cols_ << "]";
  return os.str();
}

void Tensor2D::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor2D Tensor2D::transposed() const {
  Tensor2D out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  return out;
}

// ---------------------------------------------------------------------------
// Products

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  Tensor2D out(a.rows(), b.cols());
  if (out.size() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_bt", a, b);
  Tensor2D out(a.rows(), b.rows());
  if (out.size() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Tensor2D matmul_at(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows()) shape_mismatch("matmul_at", a, b);
  Tensor2D out(a.cols(), b.cols());
  if (out.size() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

void add_matmul_at(Tensor2D& out, const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows()) shape_mismatch("add_matmul_at", a, b);
  if (out.rows() != a.cols() || out.cols() != b.cols()) shape_mismatch("add_matmul_at", out, b);
  if (out.size() == 0) return;
  view(out).noalias() += view(a).transpose() * view(b);
}

// ---------------------------------------------------------------------------
// Vector kernels

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("dot: lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  const double nu = l2_norm(u);
  const double nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) throw InvalidArgument("cosine_similarity: zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

LossAndGrad cross_entropy_loss_and_grad(const Tensor2D& logits,
                                        std::span<const std::uint32_t> targets) {
  if (targets.size() != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     logits.shape_string());
  }
  const std::size_t vocab = logits.cols();
  LossAndGrad out{0.0, Tensor2D(logits.rows(), vocab)};
  if (logits.rows() == 0) return out;
  const double inv_t = 1.0 / static_cast<double>(logits.rows());
  CompensatedSum loss;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (targets[t] >= vocab) {
      throw InvalidArgument("cross_entropy: target " + std::to_string(targets[t]) +
                            " out of range for vocab " + std::to_string(vocab));
    }
    auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    loss.add(log_z - row[targets[t]]);
    auto g = out.grad.row(t);
    for (std::size_t v = 0; v < vocab; ++v) g[v] = std::exp(row[v] - log_z) * inv_t;
    g[targets[t]] -= inv_t;
  }
  out.loss = loss.value() * inv_t;
  return out;
}

void CompensatedSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    compensation_ += (sum_ - t) + x;
  } else {
    compensation_ += (x - t) + sum_;
  }
  sum_ = t;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Eigen / PCA

SymmetricEigen symmetric_eigen(const Tensor2D& matrix) {
  if (matrix.rows() != matrix.cols()) {
    throw ShapeError("symmetric_eigen: matrix is not square " + matrix.shape_string());
  }
  const std::size_t n = matrix.rows();
  Tensor2D a = matrix;
  Tensor2D v = Tensor2D::identity(n);

  double total = 0.0;
  for (double x : a.values()) total += x * x;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * total || off == 0.0) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymmetricEigen out{std::vector<double>(n), Tensor2D(n, n)};
  for (std::size_t r = 0; r < n; ++r) {
    out.values[r] = a(order[r], order[r]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(r, k) = v(k, order[r]);
  }
  return out;
}

std::vector<double> PcaProjection::project(std::span<const double> x) const {
  if (x.size() != mean.size()) throw ShapeError("PcaProjection::project: dimension mismatch");
  std::vector<double> out(components.rows(), 0.0);
  for (std::size_t c = 0; c < components.rows(); ++c) {
    auto comp = components.row(c);
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += comp[j] * (x[j] - mean[j]);
    out[c] = s;
  }
  return out;
}

Tensor2D PcaProjection::project(const Tensor2D& x) const {
  Tensor2D out(x.rows(), components.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto p = project(x.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

PcaProjection pca_fit(const Tensor2D& x, std::size_t m) {
  if (m == 0) throw InvalidArgument("pca_fit: m must be >= 1");
  if (x.rows() < m + 1) {
    throw InvalidArgument("pca_fit: need at least " + std::to_string(m + 1) + " rows, got " +
                          std::to_string(x.rows()));
  }
  if (m > x.cols()) {
    throw InvalidArgument("pca_fit: m=" + std::to_string(m) + " exceeds dimension " +
                          std::to_string(x.cols()));
  }
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();

  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(r, j);
  for (double& v : mean) v /= static_cast<double>(n);

  Tensor2D centered(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) centered(r, j) = x(r, j) - mean[j];

  Tensor2D cov = matmul_at(centered, centered);
  for (double& v : cov.values()) v /= static_cast<double>(n - 1);
  // exact symmetry for the Jacobi sweep
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) cov(j, i) = cov(i, j);

  SymmetricEigen eig = symmetric_eigen(cov);
  const double top = eig.values.empty() ? 0.0 : std::max(eig.values.front(), 0.0);
  std::size_t rank = 0;
  for (double lambda : eig.values)
    if (top > 0.0 && lambda > 1e-10 * top) ++rank;
  if (rank < m) {
    throw InvalidArgument("pca_fit: input rank " + std::to_string(rank) + " is below requested m=" +
                          std::to_string(m));
  }

  PcaProjection out{Tensor2D(m, d), std::move(mean), std::vector<double>(m)};
  for (std::size_t c = 0; c < m; ++c) {
    auto src = eig.vectors.row(c);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(src[j]) > std::abs(src[arg])) arg = j;
    const double sign = src[arg] < 0.0 ? -1.0 : 1.0;
    double nrm = l2_norm(src);
    for (std::size_t j = 0; j < d; ++j) out.components(c, j) = sign * src[j] / nrm;
    out.explained_variance[c] = std::max(eig.values[c], 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logistic probe

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double LogisticProbe::predict_proba(std::span<const double> row) const {
  double z = bias;
  for (std::size_t i = 0; i < feature_indices.size(); ++i) {
    const double xi = (row[feature_indices[i]] - feature_mean[i]) / feature_scale[i];
    z += weights[i] * xi;
  }
  return sigmoid(z);
}

double LogisticProbe::accuracy(const Tensor2D& x, std::span<const int> labels) const {
  if (labels.size() != x.rows()) throw ShapeError("LogisticProbe::accuracy: label count mismatch");
  if (x.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < x.rows(); ++r)
    if (predict(x.row(r)) == labels[r]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(x.rows());
}

LogisticProbe logistic_fit(const Tensor2D& x, std::span<const std::size_t> feature_indices,
                           std::span<const int> labels, const LogisticOptions& options) {
  if (labels.size() != x.rows()) throw ShapeError("logistic_fit: label count mismatch");
  std::vector<std::size_t> sorted(feature_indices.begin(), feature_indices.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("logistic_fit: duplicate feature index");
  }
  for (std::size_t j : feature_indices)
    if (j >= x.cols()) throw InvalidArgument("logistic_fit: feature index out of range");
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidArgument("logistic_fit: labels must be 0/1");
    positives += static_cast<std::size_t>(y);
  }
  if (positives == 0 || positives == labels.size()) {
    throw InvalidArgument("logistic_fit: both classes must be present");
  }

  const std::size_t n = x.rows();
  const std::size_t k = feature_indices.size();
  LogisticProbe probe;
  probe.feature_indices.assign(feature_indices.begin(), feature_indices.end());
  probe.weights.assign(k, 0.0);
  probe.feature_mean.assign(k, 0.0);
  probe.feature_scale.assign(k, 1.0);

  Tensor2D z(n, k);
  for (std::size_t i = 0; i < k; ++i) {
    double mu = 0.0;
    for (std::size_t r = 0; r < n; ++r) mu += x(r, feature_indices[i]);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double dv = x(r, feature_indices[i]) - mu;
      var += dv * dv;
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    probe.feature_mean[i] = mu;
    probe.feature_scale[i] = sd > 1e-12 ? sd : 1.0;
    for (std::size_t r = 0; r < n; ++r)
      z(r, i) = (x(r, feature_indices[i]) - mu) / probe.feature_scale[i];
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> grad(k);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      auto row = z.row(r);
      double s = probe.bias;
      for (std::size_t i = 0; i < k; ++i) s += probe.weights[i] * row[i];
      const double err = sigmoid(s) - static_cast<double>(labels[r]);
      for (std::size_t i = 0; i < k; ++i) grad[i] += err * row[i];
      grad_b += err;
    }
    for (std::size_t i = 0; i < k; ++i) {
      probe.weights[i] -= options.lr * (grad[i] * inv_n + options.l2 * probe.weights[i]);
    }
    probe.bias -= options.lr * grad_b * inv_n;
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::span<const ParamRef> params, const GradientSet& grads, AdamState& state,
               const AdamConfig& config, double lr) {
  for (const auto& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    if (!p.tensor->same_shape(it->second)) {
      throw ShapeError("adam_step: gradient for " + p.name + " has shape " +
                       it->second.shape_string() + ", parameter is " + p.tensor->shape_string());
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);

  for (const auto& p : params) {
    if (!p.trainable) continue;
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    const Tensor2D& g = it->second;
    auto [slot, inserted] = state.moments.try_emplace(p.name);
    if (inserted) {
      slot->second.m = Tensor2D(g.rows(), g.cols());
      slot->second.v = Tensor2D(g.rows(), g.cols());
    } else if (!slot->second.m.same_shape(g)) {
      throw ShapeError("adam_step: optimizer state for " + p.name + " has shape " +
                       slot->second.m.shape_string());
    }
    using Vec = Eigen::Map<Eigen::ArrayXd>;
    const Eigen::Index n = static_cast<Eigen::Index>(g.size());
    Vec m(slot->second.m.data(), n);
    Vec v(slot->second.v.data(), n);
    Vec w(p.tensor->data(), n);
    Eigen::Map<const Eigen::ArrayXd> gv(g.data(), n);
    m = config.beta1 * m + (1.0 - config.beta1) * gv;
    v = config.beta2 * v + (1.0 - config.beta2) * gv.square();
    w -= lr * (m / c1) / ((v / c2).sqrt() + config.eps);
  }
}

double global_norm(const GradientSet& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    s += Eigen::Map<const Eigen::ArrayXd>(g.data(), static_cast<Eigen::Index>(g.size())).square().sum();
  return std::sqrt(s);
}

double clip_global_norm(GradientSet& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
      Eigen::Map<Eigen::ArrayXd>(g.data(), static_cast<Eigen::Index>(g.size())) *= scale;
  }
  return norm;
}

}  // namespace adaptlab
