#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmtl/rng.hpp"

namespace mmtl {

/// Dense row-major tensor of 64-bit floats with tape-based reverse-mode
/// autodiff. Rank 0 (scalar), 1 (vector) and 2 (matrix) are supported.
///
/// A Tensor is a cheap handle onto shared storage. Ops are free functions;
/// when grad recording is enabled (the default) and any input requires
/// gradients, the output remembers its parents and a backward closure.
/// backward(loss) runs reverse accumulation over the recorded graph.
///
/// There are no strides or views; every op materializes its output.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor vec(std::vector<double> values, bool requires_grad = false);
  static Tensor mat(int rows, int cols, std::vector<double> values,
                    bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, double stddev, Rng& rng,
                      bool requires_grad = false);
  static Tensor identity(int n);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int ndim() const;
  size_t numel() const;
  int rows() const;  // rank-2 only
  int cols() const;  // rank-2 only

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;  // numel()==1 only
  double at(int i) const;
  double at(int i, int j) const;
  void set(int i, double v);
  void set(int i, int j, double v);

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool is_leaf() const;

  /// Gradient accumulated by the last backward(); empty span if never touched.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// A leaf copy of the values, cut off from the recorded graph.
  Tensor detach() const;
  /// A leaf deep copy that keeps requires_grad.
  Tensor clone() const;

  bool all_finite() const;
  /// Throws NumericError if any entry is NaN/Inf. `what` names the tensor.
  void check_finite(const std::string& what) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend struct TensorOps;
  friend void backward(const Tensor& loss);

  struct Impl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // lazily sized by backward
    std::vector<std::shared_ptr<Impl>> parents;
    std::function<void(Impl&)> backward_fn;  // reads grad, accumulates parents
  };

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

/// Scoped switch that disables graph recording (forwards become plain math).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

bool grad_enabled();

// ---- ops ------------------------------------------------------------------

/// Exact dense row-major product, a: m×k, b: k×n.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& a, double s);
/// m + v broadcast over rows (bias add), m: r×c, v: length c.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor gelu(const Tensor& a);  // exact erf form
/// Row-wise softmax, numerically stabilized by row-max subtraction.
/// With `causal` set (square input), entries j > i are exactly 0 and rows
/// renormalize over j <= i.
Tensor softmax_rows(const Tensor& a, bool causal = false);
Tensor log_softmax_rows(const Tensor& a);
/// Row-wise layer norm with learned gain/bias (length cols).
Tensor layernorm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5);
/// Gather rows of `table` by id; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor vstack(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor hstack(const std::vector<Tensor>& parts);
/// Copy of m with row r replaced by v (length cols). Grad flows to the
/// untouched rows of m and to v.
Tensor row_overwrite(const Tensor& m, int r, const Tensor& v);
/// Copy of m with v added to row r.
Tensor row_add(const Tensor& m, int r, const Tensor& v);
/// Scalar sum of -a[r][c] over the given (row, col) index pairs.
Tensor neg_pick_sum(const Tensor& a, const std::vector<std::pair<int, int>>& idx);
Tensor sum(const Tensor& a);

/// Reverse accumulation from a scalar loss into every reachable
/// requires_grad leaf. Gradients accumulate; call zero_grad between uses.
void backward(const Tensor& loss);

// ---- plain (untaped) linear algebra ---------------------------------------

/// (λI + kkᵀ)⁻¹ via Sherman-Morrison: (1/λ)(I − kkᵀ/(λ + kᵀk)).
/// k is a vector of length d; λ must be > 0.
Tensor solve_regularized_rank1(double lambda, const Tensor& k);

/// Thrown when a computation produces NaN/Inf or an ill-posed system.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmtl
