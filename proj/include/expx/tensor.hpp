#pragma once

// Dense n-d array with reverse-mode gradients over a dynamically recorded
// graph. A Tensor is a shared handle: copies alias the same storage, and
// every op result keeps its inputs alive until the graph is dropped.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "expx/error.hpp"

namespace expx {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const std::vector<T>&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<NodeT>()) {
    check_extents(shape);
    node_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<NodeT>()) {
    check_extents(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor from_node(std::shared_ptr<NodeT> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::int64_t dim(std::size_t axis) const {
    if (axis >= ndim())
      throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(shape()));
    return node_->shape[axis];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // In-place access; only valid on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
  }

  // Graph-free copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(v));
  }

  const std::shared_ptr<NodeT>& node() const { return node_; }

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // reachable node that requires grad; call zero_grad on leaves between steps.
  void backward() const {
    if (!node_ || numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       (node_ ? shape_str(shape()) : std::string("<undefined>")));
    if (!node_->requires_grad) return;

    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    // Iterative post-order DFS; parent visiting order is fixed so the sweep
    // is deterministic for a given graph.
    std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        NodeT* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(n->grad);
    }
  }

 private:
  static void check_extents(const Shape& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (shape[i] < 0)
        throw ShapeError("tensor: negative extent at dim " + std::to_string(i));
  }

  std::shared_ptr<NodeT> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace expx
