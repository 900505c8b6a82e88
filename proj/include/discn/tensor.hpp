#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "discn/common.hpp"

namespace discn {

// Reverse-mode autodiff over dense row-major tensors. Each Tensor is a
// value-semantic handle to a graph node; ops build the graph when gradient
// tracking is enabled and backward() walks it in reverse topological order.

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// RAII switch: disables graph construction (inference / data plumbing).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily; same length as value when present
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void accumulate(const std::vector<T>& g) {
    ensure_grad();
    for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
};

template <class T>
class Tensor {
 public:
  Tensor() : n_(std::make_shared<Node<T>>()) {
    n_->shape = {0};
  }
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s) { return filled(s, T(0)); }
  static Tensor ones(const Shape& s) { return filled(s, T(1)); }
  static Tensor filled(const Shape& s, T v) {
    auto n = std::make_shared<Node<T>>();
    n->shape = s;
    n->value.assign(static_cast<size_t>(discn::numel(s)), v);
    return Tensor(n);
  }
  static Tensor from_data(const Shape& s, std::vector<T> data) {
    require_dim(static_cast<long>(data.size()) == discn::numel(s),
                "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(s));
    auto n = std::make_shared<Node<T>>();
    n->shape = s;
    n->value = std::move(data);
    return Tensor(n);
  }
  static Tensor scalar(T v) { return from_data({1}, {v}); }

  const Shape& shape() const { return n_->shape; }
  long dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  long numel() const { return discn::numel(n_->shape); }

  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& mutable_data() { return n_->value; }

  T item() const {
    require(numel() == 1, ErrorKind::Contract, "item() requires a scalar tensor, got " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    n_->requires_grad = b;
    if (b) n_->ensure_grad();
    return *this;
  }

  const std::vector<T>& grad() const {
    require(n_->grad.size() == n_->value.size(), ErrorKind::Contract,
            "tensor has no gradient buffer");
    return n_->grad;
  }
  bool has_grad() const { return n_->grad.size() == n_->value.size(); }
  void zero_grad() {
    if (n_->requires_grad) {
      n_->ensure_grad();
      std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }
  }

  // Value copy outside the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(n);
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  // Reverse pass from a scalar. Accumulates into the grad buffers of every
  // requires_grad node reachable from this one.
  void backward() const {
    require(numel() == 1, ErrorKind::Contract,
            "backward() requires a scalar loss, got " + shape_str(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx].get();
        ++idx;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
        // Interior activations and closures are dead after their backward ran.
        if (!node->parents.empty() && node != n_.get()) {
          node->grad.clear();
          node->grad.shrink_to_fit();
          node->backward_fn = nullptr;
        }
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Helper for op implementations: result node wiring.
template <class T>
Tensor<T> make_op_node(Shape shape, std::vector<T> value,
                       std::vector<Tensor<T>> inputs,
                       std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs)
      if (in.requires_grad()) any = true;
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs) n->parents.push_back(in.node());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>(n);
}

// A named trainable (or tracked) tensor plus its momentum buffer.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> velocity;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t, bool train = true)
      : name(std::move(n)), tensor(std::move(t)), trainable(train) {
    if (trainable) {
      tensor.set_requires_grad(true);
      velocity.assign(static_cast<size_t>(tensor.numel()), T(0));
    }
  }
};

// v <- momentum*v + (grad + weight_decay*w);  w <- w - lr*v
template <class T>
void sgd_step(std::vector<Parameter<T>*>& params, T lr, T momentum, T weight_decay) {
  require(lr > T(0), ErrorKind::Config, "sgd_step: learning rate must be positive");
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    auto& w = p->tensor.mutable_data();
    const auto& g = p->tensor.grad();
    auto& v = p->velocity;
    for (size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + (g[i] + weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace discn
