#pragma once

// Define-by-run reverse-mode differentiation over dense matrices.
//
// Primitives record themselves on the calling thread's active Tape (see
// TapeScope) whenever at least one input requires a gradient. Without an
// active tape every primitive is a plain forward evaluation, which is how
// evaluation code runs the model without paying for backward bookkeeping.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sonoalign/matrix.hpp"

namespace sonoalign::ad {

namespace detail {
struct Node;
}

class Tape;

class Tensor {
 public:
  Tensor() = default;
  // Leaf tensor. Parameters pass requires_grad = true.
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }
  static Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Matrix& value() const;
  // Direct access for optimizers and finite-difference probes. Only valid on
  // leaves; mutating a recorded intermediate would desynchronize the tape.
  Matrix& mutable_value();

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Null until a backward pass reaches this tensor.
  const Matrix* grad() const;
  void zero_grad();

  // Name of the primitive that produced this tensor ("leaf" for leaves).
  const std::string& op_name() const;

  // Deep copy of a leaf, detached from any tape. Gradient is not copied.
  Tensor clone() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend Tensor make_op(std::string, Matrix, std::vector<Tensor>,
                        std::function<void(const Matrix&, const Matrix&, std::span<Matrix*>)>);
};

// Backward rule: receives the op's forward output, dLoss/dOutput and one
// gradient buffer per input (nullptr when that input does not require a
// gradient). Rules must add into the buffers, never overwrite.
using BackwardFn =
    std::function<void(const Matrix& out, const Matrix& grad_out, std::span<Matrix*> input_grads)>;

// Records a custom primitive. Every built-in op goes through this; it is
// public so tests and extensions can define their own rules.
Tensor make_op(std::string name, Matrix value, std::vector<Tensor> inputs, BackwardFn backward);

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Propagates d(loss)/d(.) to every reachable tensor that requires a
  // gradient. Intermediate gradients are recomputed from scratch on every
  // call; leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear();

 private:
  friend Tensor make_op(std::string, Matrix, std::vector<Tensor>, BackwardFn);

  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Makes `tape` the active tape of the current thread for the scope's
// lifetime; restores the previously active tape on exit.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Active tape of the current thread, or nullptr.
Tape* active_tape() noexcept;

// Runs backward on the active tape.
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
// a (m x n) + row (1 x n) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double factor);
// a * s and a / s for a 1x1 tensor s.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor div_scalar(const Tensor& a, const Tensor& s);

Tensor row_softmax(const Tensor& a);
Tensor row_log_softmax(const Tensor& a);

Tensor tanh_elem(const Tensor& a);
Tensor relu_elem(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor sigmoid_elem(const Tensor& a);
// Gradient passes only where lo < value < hi.
Tensor clamp_elem(const Tensor& a, double lo, double hi);

// Row-wise layer normalization with population variance; gain and bias are
// 1 x D and shared by every row.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Row-wise a / max(||a||, eps).
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

// Sum of all entries (1 x 1).
Tensor sum(const Tensor& a);
// Column means over rows (1 x n).
Tensor mean_rows(const Tensor& a);
// Main diagonal of a square matrix as 1 x n.
Tensor diagonal(const Tensor& a);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// Rows of `table` selected by index (duplicates allowed).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
// Row i = mean of table rows listed in bags[i]; an empty bag yields zeros.
Tensor bag_mean(const Tensor& table, const std::vector<std::vector<std::size_t>>& bags);

}  // namespace sonoalign::ad
