// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// Every differentiable op returns a Tensor whose Node records the inputs and
// a closure that scatters the output gradient into the inputs' gradients.
// The graph is owned by the tensors themselves (shared_ptr), so a forward
// pass builds a private graph that disappears with its last handle.

#include <algorithm>
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

#include "fmtlab/error.hpp"

namespace fmtlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Op kinds that can be targeted by gradient fault injection.
enum class OpKind {
  none,
  add,
  multiply,
  matmul,
  softmax,
  layer_norm,
  conv1d,
  relu,
  sigmoid,
  tanh,
};

namespace detail {
struct FaultState {
  OpKind op = OpKind::none;
  double factor = 1.0;
};
inline thread_local FaultState fault_state;
}  // namespace detail

// Multiplies the backward contribution of every `op` by `factor` while alive.
// Negative control for gradient checking.
class FaultInjectionScope {
 public:
  FaultInjectionScope(OpKind op, double factor) : saved_(detail::fault_state) {
    detail::fault_state = {op, factor};
  }
  ~FaultInjectionScope() { detail::fault_state = saved_; }
  FaultInjectionScope(const FaultInjectionScope&) = delete;
  FaultInjectionScope& operator=(const FaultInjectionScope&) = delete;

 private:
  detail::FaultState saved_;
};

inline double fault_factor(OpKind op) {
  return detail::fault_state.op == op ? detail::fault_state.factor : 1.0;
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::size_t size = 0;
  std::vector<double> grad;
  // Null entries are inputs that do not require gradients.
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;
  bool leaf = false;
  bool released = false;

  // Gradient buffer, zero-initialised on first touch.
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(size, 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<double>>()) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (shape_numel(shape_) != data_->size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) +
                           " does not match buffer of " +
                           std::to_string(data_->size()) + " values");
    }
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  // Leaf tensor that accumulates gradients across backward passes.
  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.node_ = std::make_shared<Node>();
    t.node_->size = t.numel();
    t.node_->leaf = true;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  // In-place access for optimizers and initialisers. Does not touch the graph.
  std::span<double> mutable_data() { return *data_; }
  const std::vector<double>& values() const { return *data_; }

  double item() const {
    if (numel() != 1) {
      throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    }
    return (*data_)[0];
  }

  bool requires_grad() const { return node_ != nullptr; }
  bool is_leaf() const { return node_ && node_->leaf; }
  const NodePtr& node() const { return node_; }

  // Accumulated gradient of a leaf; zeros if nothing has flowed yet.
  std::vector<double> grad() const {
    if (!node_ || node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  // Same values, no graph.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }
  Tensor clone() const { return Tensor(shape_, *data_); }

  // Reverse-mode accumulation from this scalar. Releases the recorded graph;
  // leaf gradients persist until zero_grad().
  void backward() const;

  // Internal: build an op result, recording a node when any input needs grad.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(Node&)> backward) {
    return make_result(std::move(shape), std::move(data),
                       std::vector<const Tensor*>(inputs), std::move(backward));
  }
  static Tensor make_result(Shape shape, std::vector<double> data,
                            const std::vector<const Tensor*>& inputs,
                            std::function<void(Node&)> backward) {
    return make_result(std::move(shape),
                       std::make_shared<std::vector<double>>(std::move(data)),
                       inputs, std::move(backward));
  }
  // Shared-buffer form, for closures that need the op's own output values.
  static Tensor make_result(Shape shape, std::shared_ptr<std::vector<double>> data,
                            const std::vector<const Tensor*>& inputs,
                            std::function<void(Node&)> backward) {
    if (shape_numel(shape) != data->size()) {
      throw DimensionError("op result shape " + shape_str(shape) + " does not match buffer");
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = std::move(data);
    if (!grad_enabled()) return out;
    bool any = false;
    for (auto* in : inputs) any = any || in->requires_grad();
    if (!any) return out;
    out.node_ = std::make_shared<Node>();
    out.node_->size = out.numel();
    out.node_->inputs.reserve(inputs.size());
    for (auto* in : inputs) out.node_->inputs.push_back(in->node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  // Internal: the shared value buffer (views and output-capturing closures).
  const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  NodePtr node_;
};

inline void Tensor::backward() const {
  if (!node_) {
    throw UsageError("backward() on a tensor that is not part of a recorded graph");
  }
  if (node_->released) {
    throw UsageError("backward() called on an already released graph");
  }
  if (numel() != 1) {
    throw DimensionError("backward() requires a scalar loss, got " + shape_str(shape_));
  }
  if (node_->leaf) {
    node_->grad_buffer()[0] += 1.0;
    return;
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child && !child->leaf && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(n);
    stack.pop_back();
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->released) {
      throw UsageError("backward() reached a node of a released graph");
    }
    if (!n->grad.empty() && n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    n->backward = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

}  // namespace fmtlab
