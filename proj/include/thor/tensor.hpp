// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "thor/errors.hpp"

namespace thor::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// FLOP accounting. Forward arithmetic is attributed to the category that is
// active when the op runs; data movement (gathers, scatters) counts zero.

enum class FlopCategory : std::size_t { kOther = 0, kAttention, kExpert, kGate, kRouting, kCount };

struct FlopCounter {
  std::array<std::uint64_t, static_cast<std::size_t>(FlopCategory::kCount)> counts{};

  std::uint64_t operator[](FlopCategory c) const { return counts[static_cast<std::size_t>(c)]; }
  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }
};

namespace detail {
inline FlopCounter*& active_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}
inline FlopCategory& active_category() {
  thread_local FlopCategory category = FlopCategory::kOther;
  return category;
}
}  // namespace detail

inline void count_flops(std::uint64_t n) {
  if (auto* c = detail::active_counter()) c->counts[static_cast<std::size_t>(detail::active_category())] += n;
}

/// Installs `counter` as the sink for forward FLOPs on this thread.
class FlopCounting {
 public:
  explicit FlopCounting(FlopCounter& counter) : previous_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~FlopCounting() { detail::active_counter() = previous_; }
  FlopCounting(const FlopCounting&) = delete;
  FlopCounting& operator=(const FlopCounting&) = delete;

 private:
  FlopCounter* previous_;
};

class FlopScope {
 public:
  explicit FlopScope(FlopCategory category) : previous_(detail::active_category()) {
    detail::active_category() = category;
  }
  ~FlopScope() { detail::active_category() = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCategory previous_;
};

// ---------------------------------------------------------------------------

/// Dense row-major array of doubles with optional gradient and graph linkage.
/// Copies share the underlying node (handle semantics, like a shared_ptr).
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (ad::numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " + std::to_string(ad::numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double value) {
    const auto n = ad::numel(shape);
    return constant(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return constant({1}, {v}); }

  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> values() const { return node_->values; }
  /// Direct write access; only meaningful for leaves (optimizer updates, tests).
  std::span<double> data() { return node_->values; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->values[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf holding a copy of the values, disconnected from the graph.
  Tensor detach() const { return constant(shape(), node_->values); }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
  /// intermediate gradients are recomputed on every call.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + to_string(shape()));

  // Iterative post-order DFS: each node is visited exactly once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->values.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace detail {

/// Builds an op result. Graph linkage is recorded only when grad mode is on and
/// at least one input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->leaf = false;
      for (auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace thor::ad
