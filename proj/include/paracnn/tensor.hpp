// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense real tensors with a dynamic reverse-mode differentiation tape.
 *
 * A Tensor is a cheap handle onto a graph node (values, lazily allocated
 * gradient, and the closure that pushes the node's gradient to its parents).
 * Every operation below records itself on the tape when grad mode is on and
 * at least one input requires a gradient. Tensor::backward() walks the tape
 * in reverse topological order and then releases it.
 *
 * Broadcasting is restricted to trailing-dimension alignment: the smaller
 * operand's shape must be a suffix of the larger one's. Anything else throws
 * ShapeError.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace paracnn {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

std::size_t numel_of(const Shape &shape);
std::string to_string(const Shape &shape);

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct Node;

class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  std::vector<double> values() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Backpropagate from this scalar tensor, then release the tape.
  void backward();
  /// Same node values, cut from the graph.
  Tensor detach() const;

  bool same_node(const Tensor &other) const { return node_ == other.node_; }
  const std::shared_ptr<Node> &node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node &)> backward_fn;

  std::span<double> grad_buffer();
};

bool grad_enabled();

class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

// --- element-wise ---------------------------------------------------------
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double factor);
Tensor add_scalar(const Tensor &a, double value);
Tensor sigmoid(const Tensor &x);
Tensor tanh(const Tensor &x);
Tensor relu(const Tensor &x);
Tensor square(const Tensor &x);

// --- linear algebra -------------------------------------------------------
/// a[..., k] · b[k, n] -> [..., n]
Tensor matmul(const Tensor &a, const Tensor &b);
/// a[G, m, k] · b[G, k, n] (or b[G, n, k] when transpose_b) -> [G, m, n]
Tensor bmm(const Tensor &a, const Tensor &b, bool transpose_b = false);
/// x[..., in] · w[in, out] + bias[out]
Tensor linear(const Tensor &x, const Tensor &w, const Tensor &bias);

// --- structure ------------------------------------------------------------
Tensor concat(const std::vector<Tensor> &parts, std::size_t axis);
Tensor slice(const Tensor &x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor reshape(const Tensor &x, Shape shape);
Tensor transpose(const Tensor &x, std::size_t axis0, std::size_t axis1);
/// x[G, C] -> [G, n, C] (each row repeated n times)
Tensor expand(const Tensor &x, std::size_t n);
/// Rows of table[n, C] picked by index; index -1 yields a zero row.
Tensor gather_rows(const Tensor &table, std::span<const std::int64_t> index);
/// a[G, L, h] ⊕ b[G, R, h] -> [G, L, R, h] with out[g,l,r] = a[g,l] + b[g,r]
Tensor pairwise_add(const Tensor &a, const Tensor &b);
/// x[G, T, C] -> [G, T, k·C]; row t holds frames t-k+1..t, zeros before 0.
Tensor causal_unfold(const Tensor &x, std::size_t kernel);

// --- reductions and normalisers --------------------------------------------
Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);
/// x[G, T, C], mask[G·T] -> [G, C]; rows with no valid entry give zeros.
Tensor masked_mean(const Tensor &x, const Mask &mask);
/// x[G, R, C], mask[G·R] -> [G, C]; ties resolve to the lowest index.
Tensor masked_max(const Tensor &x, const Mask &mask);
/// Softmax along `axis`. When `mask` (same numel as x) is given, masked
/// entries are excluded and output 0; a fully masked slice outputs zeros.
Tensor softmax(const Tensor &x, std::size_t axis, const Mask *mask = nullptr);
Tensor log_softmax(const Tensor &x, std::size_t axis);
/// Gated linear unit over the last axis: [..., 2c] -> A ⊙ σ(B), [..., c].
Tensor glu(const Tensor &x);

class EmptyLossError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Mean negative log-likelihood of targets under logits[n, V] over
/// positions whose mask is set. Throws EmptyLossError if none is.
Tensor cross_entropy(const Tensor &logits, std::span<const std::int64_t> targets,
                     const Mask &mask);

// --- verification ----------------------------------------------------------
/// Central-difference gradient check of scalar f with respect to every
/// element of every tensor in `inputs`. Returns the max relative error,
/// with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()> &f,
                  const std::vector<Tensor> &inputs, double eps = 1e-5);
/// As above, but the numeric derivative is the Richardson combination of
/// central differences at eps and 2·eps. Where that estimate and backprop
/// disagree by more than 1e-5 relative, the coordinate is re-estimated by
/// Ridders' extrapolation from step 32·eps, whose own error estimate picks
/// the step. Small gradient entries of an O(1) loss then stay above
/// round-off in f.
double grad_check_refined(const std::function<Tensor()> &f,
                          const std::vector<Tensor> &inputs, double eps);
double grad_check(const std::function<Tensor(const Tensor &)> &f,
                  const Tensor &x, double eps = 1e-5);

namespace debug {
/// Test-only fault injection used as a negative control for gradient checks.
enum class Fault { none, sigmoid_backward, matmul_backward };
void inject_fault(Fault fault);
Fault active_fault();
} // namespace debug

} // namespace paracnn
