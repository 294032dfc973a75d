#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "qpm/tensor.hpp"

namespace qpm {

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// One vertex of the reverse-mode graph. `backward` reads `grad` and
/// accumulates into the grads of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  /// Gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer();
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Tensor& value() const { return node_->value; }
  /// Direct write access, for optimizers and weight loading.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  /// Scalar value of a one-element tensor.
  double item() const;

  void zero_grad() { node_->grad = Tensor(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

  /// Result of an op. Records the edge only when grad mode is on and some
  /// input requires a gradient.
  static Var from_op(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 and runs the graph in reverse topological order.
void backward(const Var& root);

}  // namespace qpm
