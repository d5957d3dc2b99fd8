#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "acia/tensor.hpp"

namespace acia::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Propagates node.grad into the grads of node.inputs.
using BackwardFn = std::function<void(Node& node)>;

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated; empty until something flows in
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  // Adds g into grad, allocating zeros on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

// Handle to a value in the autograd graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  Scalar item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Gradient accumulated by backward(); zeros of the value's shape if nothing flowed.
  Tensor grad() const;
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate.
  void backward() const;
  // Same, seeded with an explicit upstream gradient of the value's shape.
  void backward(const Tensor& seed) const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node. The backward closure is only attached when grad mode
// is on and at least one input requires grad.
Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward);

// Value snapshot with no history.
Var detach(const Var& v);

}  // namespace acia::nn
