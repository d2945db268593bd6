#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ucl/check.hpp"

namespace ucl {

using Index = Eigen::Index;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Dense n-d value: a shape plus a flat row-major buffer backed by Eigen.
/// Rank-2 data maps onto Eigen matrices without copying; image batches are
/// stored as rank-4 (N, C, H, W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    data_ = Eigen::ArrayXd::Zero(count(shape_));
  }
  Tensor(std::vector<Index> shape, Eigen::ArrayXd data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    UCL_CHECK(data_.size() == count(shape_), "tensor data does not match shape");
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<Index> shape, double v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(double v) { return full({}, v); }
  static Tensor from_matrix(const Eigen::Ref<const RowMatrixXd>& m) {
    Tensor t({m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }
  static Tensor from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
    Tensor t({v.size()});
    t.array() = v.array();
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  Index dim(int i) const { return shape_.at(std::size_t(i)); }
  Index size() const { return data_.size(); }
  bool defined() const { return data_.size() > 0; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  Eigen::Map<Eigen::ArrayXd> array() { return {data_.data(), data_.size()}; }
  Eigen::Map<const Eigen::ArrayXd> array() const { return {data_.data(), data_.size()}; }

  /// Rank-0/1 tensors read as single-row matrices; rank-2 as (d0, d1).
  Eigen::Map<RowMatrixXd> matrix() {
    auto [r, c] = matrix_dims();
    return {data_.data(), r, c};
  }
  Eigen::Map<const RowMatrixXd> matrix() const {
    auto [r, c] = matrix_dims();
    return {data_.data(), r, c};
  }

  /// View of the flat buffer as (rows, cols); product must equal size().
  Eigen::Map<RowMatrixXd> as_matrix(Index rows, Index cols) {
    UCL_CHECK(rows * cols == size(), "as_matrix: element count mismatch");
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const RowMatrixXd> as_matrix(Index rows, Index cols) const {
    UCL_CHECK(rows * cols == size(), "as_matrix: element count mismatch");
    return {data_.data(), rows, cols};
  }

  double item() const {
    UCL_CHECK(size() == 1, "item() needs a single-element tensor");
    return data_[0];
  }

  Tensor reshaped(std::vector<Index> shape) const {
    UCL_CHECK(count(shape) == size(), "reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
  }

 private:
  std::pair<Index, Index> matrix_dims() const {
    if (rank() == 2) return {shape_[0], shape_[1]};
    return {1, size()};
  }

  std::vector<Index> shape_;
  Eigen::ArrayXd data_;
};

// ---------------------------------------------------------------------------
// Reverse-mode automatic differentiation over Tensors.
//
// Ops build a dynamic graph of Nodes; backward(root) runs the tape in reverse
// topological order. Graphs are rebuilt per training step and released when
// the root handle goes out of scope. Construction is skipped entirely when
// gradients are globally disabled or no input requires them.
// ---------------------------------------------------------------------------

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad into parents' grads
  const char* op = "";

  Tensor& grad_buffer() {
    if (!grad.defined() || grad.size() != value.size()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value_mut() { return node_->value; }  // leaf updates only (optimizer)
  const Tensor& grad() const { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.defined(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() {
    if (node_ && node_->grad.defined()) node_->grad.array().setZero();
  }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Var wrap(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// RAII guard disabling graph construction (evaluation / frozen passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// Runs the tape from a scalar root, accumulating leaf gradients.
void backward(const Var& root);

// Elementwise and matrix ops. All validate shapes and are exercised by
// finite-difference tests.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_rowvec(const Var& x, const Var& v);  // (R,C) + (C)

Var matmul(const Var& a, const Var& b);     // (m,k) x (k,n)
Var matmul_nt(const Var& a, const Var& b);  // (m,k) x (n,k)^T

Var vexp(const Var& a);
Var vlog(const Var& a);
Var vtanh(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var mish(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_squares(const Var& a);

Var reshape(const Var& a, std::vector<Index> shape);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index begin, Index count);

/// Row-wise L2 normalization of a (B, d) batch. Rows must be nonzero.
Var normalize_rows(const Var& a);

/// Softmax cross-entropy over cosine-score rows, the shared core of every
/// contrastive objective here. scores(i,j) = <anchor_i, comparand_j> / tau
/// restricted to `allowed`; the positive column per anchor is always allowed.
/// Returns the mean over anchors of -log softmax(scores_i)[positive_i].
Var nt_xent(const Var& anchors, const Var& comparands, const std::vector<Index>& positive_col,
            const BoolMatrix& allowed, double tau);

// Layer primitives (NCHW layout).
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int padding);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps);
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps);
Var global_avg_pool(const Var& x);

}  // namespace ucl
