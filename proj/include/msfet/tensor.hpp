#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msfet/error.hpp"

namespace msfet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// One value in the computation graph. Non-leaf nodes carry the inputs they
/// were computed from and a rule that pushes `grad` into those inputs.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of rank <= 4 with optional gradient tracking.
/// Copies are shallow: two Tensor handles may refer to the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (shape.size() > 4) {
      throw ShapeError("tensor rank " + std::to_string(shape.size()) +
                       " exceeds 4");
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<NodeT>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view. Intended for leaves (parameters, optimizer updates,
  /// finite-difference probes); mutating a recorded intermediate corrupts
  /// its consumers' backward pass.
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) {
      throw ArgumentError("requires_grad can only be set on leaf tensors");
    }
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  T at(std::size_t i) const { return node_->data.at(i); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// New leaf holding a copy of the values, cut off from the graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  NodeT* node() const { return node_.get(); }
  const std::shared_ptr<NodeT>& handle() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op +
                         " at index " + std::to_string(i));
    }
  }
}

/// Builds the result of an op and, when any input tracks gradients and
/// recording is enabled, attaches it to the graph.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.handle());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Gradient buffer of input `i` if it participates, else nullptr.
template <typename T>
T* input_grad(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.grad_buffer().data();
}

/// Nodes reachable from `root`, inputs before consumers.
template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate (+=);
/// intermediate gradients are recomputed from zero on every call, so the
/// graph may be swept more than once.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ArgumentError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "[]"));
  }
  if (!loss.requires_grad()) {
    throw ArgumentError("backward() on a loss that is not on the tape");
  }
  auto order = detail::topological_order(loss.node());
  for (auto* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf && (*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace msfet
