#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sde/common.hpp"

namespace sde {

namespace detail {

// One recorded operation result. `parents` orders the tape for replay;
// `backprop` scatters this node's gradient into the inputs it captured.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

// Row-major N-d array of reals. Copies are shallow handles; values are
// treated as immutable once an op has produced them.
template <typename T = float>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), T(0));
  }
  static Tensor filled(Shape shape, T v) {
    auto n = std::make_shared<Node>();
    size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(count, v);
    return Tensor(std::move(n));
  }
  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return node_->value.size(); }

  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  T item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor of shape " +
                       shape_str(shape()));
    return node_->value[0];
  }

  // Row-major element lookup, test convenience.
  T at(const Shape& idx) const {
    size_t off = 0;
    for (size_t i = 0; i < idx.size(); ++i)
      off = off * static_cast<size_t>(node_->shape[i]) +
            static_cast<size_t>(idx[i]);
    return node_->value[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<T>& grad() const {
    if (!has_grad())
      throw ConfigError("tensor has no gradient; run backward() first");
    return node_->grad;
  }

  // Value copy detached from any tape.
  Tensor detach() const { return from_data(node_->shape, node_->value); }
  Tensor grad_as_tensor() const { return from_data(node_->shape, grad()); }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Shared construction path for every recorded op.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backprop) {
  auto out = Tensor<T>::zeros(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Re-zeroes the reachable tape, so a
// leaf's gradient reflects exactly one replay per call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ConfigError("backward() requires a scalar loss, got shape " +
                      shape_str(loss.shape()));
  using Node = detail::Node<T>;
  if (!loss.node()->requires_grad) return;

  // Iterative post-order DFS; `order` ends topologically sorted.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

using TensorF = Tensor<float>;

}  // namespace sde
