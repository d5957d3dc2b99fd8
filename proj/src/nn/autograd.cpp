#include "acia/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace acia::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  grad.add_(g);
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) throw std::logic_error("grad() on undefined Var");
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

void Var::backward() const {
  if (node_->value.numel() != 1) {
    throw std::logic_error("backward() without seed needs a scalar, got " + shape_str(shape()));
  }
  backward(Tensor(node_->value.shape(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  if (!node_) throw std::logic_error("backward() on undefined Var");
  if (!node_->requires_grad) return;
  if (seed.numel() != node_->value.numel()) throw std::invalid_argument("backward seed shape mismatch");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(seed.reshaped(node_->value.shape()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      // interior gradients are not needed once propagated
      n->grad = Tensor();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

Var detach(const Var& v) { return Var(v.value(), false); }

}  // namespace acia::nn
