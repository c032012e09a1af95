#include "lavi/autograd.hpp"

#include <unordered_set>

#include "lavi/error.hpp"

namespace lavi {

namespace {
thread_local bool g_grad_enabled = true;
}

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    grad = std::move(grad).reshaped(value.shape());
  } else {
    grad += g;
  }
}

void Node::accumulate(Tensor&& g) {
  if (grad.empty()) {
    grad = std::move(g).reshaped(value.shape());
  } else {
    grad += g;
  }
}

Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward_fn);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  LAVI_EXPECT(root.numel() == 1, "backward() without seed requires a scalar root, got " + shape_str(root.shape()));
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  LAVI_EXPECT(root.defined(), "backward on undefined Var");
  LAVI_EXPECT(seed.numel() == root.numel(), "backward seed shape mismatch");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      // Interior gradients are not needed once propagated.
      if (!n->inputs.empty()) n->grad = Tensor();
    }
  }
}

}  // namespace lavi
