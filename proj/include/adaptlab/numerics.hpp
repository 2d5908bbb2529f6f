#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace adaptlab {

// Over-aligned storage so vectorized reductions see the same alignment
// for every allocation and sum in the same order.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedDoubles = std::vector<double, AlignedAllocator<double>>;

// Dense row-major matrix of doubles. Every parameter and activation in the
// workbench lives in one of these.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2D identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor2D& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  void fill(double value);
  Tensor2D transposed() const;

  friend bool operator==(const Tensor2D& a, const Tensor2D& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  AlignedDoubles data_;
};

// Gradients keyed by parameter name. Only trainable parameters appear.
using GradientSet = std::map<std::string, Tensor2D>;

// ---------------------------------------------------------------------------
// Dense products. All three are backed by Eigen GEMM.

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
// a * b^T
Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b);
// a^T * b
Tensor2D matmul_at(const Tensor2D& a, const Tensor2D& b);
// out += a^T * b  (weight-gradient accumulation)
void add_matmul_at(Tensor2D& out, const Tensor2D& a, const Tensor2D& b);

// ---------------------------------------------------------------------------
// Vector kernels.

double dot(std::span<const double> u, std::span<const double> v);
double l2_norm(std::span<const double> v);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Max-subtracted softmax. Throws on empty input.
std::vector<double> softmax(std::span<const double> logits);

struct LossAndGrad {
  double loss = 0.0;
  Tensor2D grad;
};

// Mean token cross-entropy over the rows of `logits` and its gradient
// (softmax - one_hot) / T.
LossAndGrad cross_entropy_loss_and_grad(const Tensor2D& logits,
                                        std::span<const std::uint32_t> targets);

// Neumaier-compensated accumulator. Used wherever partial NLL sums from
// different partitions of a corpus are combined.
class CompensatedSum {
 public:
  void add(double x);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

bool all_finite(std::span<const double> values);

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition and PCA.

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Tensor2D vectors;            // row i is the eigenvector for values[i]
};

// Cyclic Jacobi rotations. Input must be square and symmetric.
SymmetricEigen symmetric_eigen(const Tensor2D& matrix);

struct PcaProjection {
  Tensor2D components;  // m x d, unit-norm orthogonal rows
  std::vector<double> mean;
  std::vector<double> explained_variance;  // descending

  std::vector<double> project(std::span<const double> x) const;
  Tensor2D project(const Tensor2D& x) const;
};

// Top-m principal components of the sample covariance of X. Each component's
// largest-magnitude entry is made positive.
PcaProjection pca_fit(const Tensor2D& x, std::size_t m);

// ---------------------------------------------------------------------------
// Logistic regression probe.

struct LogisticOptions {
  double l2 = 1e-4;
  std::size_t epochs = 500;
  double lr = 0.1;
};

struct LogisticProbe {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<std::size_t> feature_indices;
  // Per-feature standardization fitted on the training rows.
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;

  double predict_proba(std::span<const double> row) const;
  int predict(std::span<const double> row) const { return predict_proba(row) >= 0.5 ? 1 : 0; }
  double accuracy(const Tensor2D& x, std::span<const int> labels) const;
};

// Full-batch gradient descent from zero init on the L2-regularized mean
// logistic loss, using only the listed columns of `x`.
LogisticProbe logistic_fit(const Tensor2D& x, std::span<const std::size_t> feature_indices,
                           std::span<const int> labels, const LogisticOptions& options = {});

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ParamRef {
  std::string name;
  Tensor2D* tensor = nullptr;
  bool trainable = false;
};

struct AdamState {
  struct Moments {
    Tensor2D m;
    Tensor2D v;
  };
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

// One bias-corrected Adam update with learning rate `lr`. Parameters whose
// ParamRef is not trainable are never written, even if a gradient is present.
void adam_step(std::span<const ParamRef> params, const GradientSet& grads, AdamState& state,
               const AdamConfig& config, double lr);

double global_norm(const GradientSet& grads);
// Scales grads so their global L2 norm is at most max_norm. Returns the
// pre-clip norm.
double clip_global_norm(GradientSet& grads, double max_norm);

}  // namespace adaptlab
