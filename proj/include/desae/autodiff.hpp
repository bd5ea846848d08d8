#pragma once

// Reverse-mode differentiation over dense, row-major double tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward rule only when some input requires a gradient, so inference under
// NoGradGuard (or on constant inputs) builds no graph at all.

#include "desae/error.hpp"

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace desae::ad {

using Shape = std::vector<int>;
using Array = Eigen::ArrayXd;

std::string shape_string(const Shape& shape);
Eigen::Index shape_size(const Shape& shape);

struct Node;

/// Receives the output gradient and one slot per input; a slot is null when
/// that input does not require a gradient. Rules accumulate (+=) into slots.
using BackwardFn = std::function<void(const Array& grad_out, std::span<Array* const> grad_in)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double value);
  static Tensor from(Shape shape, Array values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  Eigen::Index size() const;

  const Array& value() const;
  /// Mutable access for parameter updates; never use on graph intermediates.
  Array& mutable_value();
  double item() const;
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  /// Gradient accumulated by backward(); zeros when none has been computed.
  Array grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Same values, no history, no gradient.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_op(std::string_view, Shape, Array, std::vector<Tensor>, BackwardFn);
  friend Tensor make_leaf(Shape, Array, bool);
};

struct Node {
  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

Tensor make_leaf(Shape shape, Array value, bool requires_grad);

/// Builds an op output. When no input requires a gradient (or a NoGradGuard is
/// active) the result is a constant and `backward` is dropped.
Tensor make_op(std::string_view name, Shape shape, Array value, std::vector<Tensor> inputs,
               BackwardFn backward);

/// Topologically ordered record of the ops reachable from a root.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  /// Seeds d(root)/d(root) = 1 and runs every backward rule once, in reverse
  /// topological order. Intermediate gradients are reset first, so calling it
  /// again after zeroing leaf gradients reproduces the same result.
  void backward();

  std::size_t size() const { return order_.size(); }

 private:
  Tensor root_;
  std::vector<Node*> order_;
};

/// Populates gradients of every leaf that requires one. Throws
/// Error(ShapeMismatch) for non-scalar losses, Error(DisconnectedGraph) when
/// the loss does not depend on any gradient-requiring tensor.
void backward(const Tensor& loss);

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, any op producing NaN/Inf throws Error(NonFiniteValue).
class FiniteCheckGuard {
 public:
  FiniteCheckGuard();
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Elementwise binary ops broadcast with numpy rules.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor atan2(const Tensor& y, const Tensor& x);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator+(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);

/// [n,k] x [k,m], or batched [B,n,k] x [B,k,m].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
/// One extent may be -1.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int begin, int end);
/// Rows of x (axis 0) picked by index.
Tensor gather(const Tensor& x, std::span<const int> index);
/// out[index[r]] += x[r] along axis 0, with `rows` output rows.
Tensor scatter_add(const Tensor& x, std::span<const int> index, int rows);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);
Tensor softmax(const Tensor& x, int axis);
/// Normalizes the last axis to zero mean, unit variance (no affine part).
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
/// Euclidean norm along `axis`, which is removed.
Tensor norm(const Tensor& x, int axis);
/// Cross product over a trailing axis of extent 3.
Tensor cross(const Tensor& a, const Tensor& b);

}  // namespace desae::ad
