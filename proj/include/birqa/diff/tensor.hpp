#pragma once

// Reverse-mode differentiation: shapes, graph nodes, variables and the tape.
//
// Nodes are reference counted. A graph records only nodes that require a
// gradient; everything else is released as soon as the last Var handle
// drops it, so inference over large images streams through memory.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "birqa/common.hpp"

namespace birqa::ad {

/// Thrown when an op produces NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Up to four dimensions; images are (C,H,W), conv weights (Co,Ci,K,K).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() > 4) throw Error("Shape: rank above 4");
    for (int d : dims) {
      if (d < 1) throw Error("Shape: dimensions must be positive");
      dims_[rank_++] = d;
    }
  }

  int rank() const { return rank_; }
  int operator[](int i) const { return dims_[i]; }
  std::size_t size() const {
    std::size_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
    return n;
  }

  // Dims left-padded to rank 4 with ones.
  std::array<int, 4> padded() const {
    std::array<int, 4> out{1, 1, 1, 1};
    for (int i = 0; i < rank_; ++i) out[4 - rank_ + i] = dims_[i];
    return out;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i) {
      if (dims_[i] != o.dims_[i]) return false;
    }
    return true;
  }

  std::string str() const {
    std::string s = "(";
    for (int i = 0; i < rank_; ++i) s += (i ? "," : "") + std::to_string(dims_[i]);
    return s + ")";
  }

 private:
  std::array<int, 4> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

/// A named learnable tensor. The grad buffer is filled by Graph::flush_param_grads.
template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(s), value(s.size(), T(0)) {}

  std::size_t size() const { return value.size(); }
};

template <class T>
struct Node {
  const char* op = "leaf";
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Graph;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::shared_ptr<Node<T>> n) : g_(g), n_(std::move(n)) {}

  bool valid() const { return n_ != nullptr; }
  Graph<T>& graph() const { return *g_; }
  Node<T>& node() const { return *n_; }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::span<const T> value() const { return n_->value; }
  std::span<const T> grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }

  T item() const {
    if (n_->value.size() != 1) throw Error("Var::item on non-scalar " + n_->shape.str());
    return n_->value[0];
  }

 private:
  Graph<T>* g_ = nullptr;
  std::shared_ptr<Node<T>> n_;
};

template <class T>
class Graph {
 public:
  /// With record_params = false, parameters enter as constants (inference
  /// or attack graphs where only input gradients are wanted).
  explicit Graph(bool record_params = true) : record_params_(record_params) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool records_params() const { return record_params_; }

  Var<T> constant(Shape shape, std::vector<T> value) {
    return leaf(shape, std::move(value), false);
  }

  Var<T> leaf(Shape shape, std::vector<T> value, bool requires_grad) {
    if (value.size() != shape.size()) {
      throw Error("Graph::leaf: value size " + std::to_string(value.size()) +
                  " does not match shape " + shape.str());
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    check_finite(*n);
    if (requires_grad) tape_.push_back(n);
    return {this, std::move(n)};
  }

  /// Leaf bound to a parameter; created once per graph and cached.
  Var<T> param(const Parameter<T>& p) {
    if (auto it = param_cache_.find(&p); it != param_cache_.end()) return {this, it->second};
    Var<T> v = leaf(p.shape, p.value, record_params_);
    param_cache_.emplace(&p, v.ptr());
    if (record_params_) params_.emplace_back(const_cast<Parameter<T>*>(&p), v.ptr());
    return v;
  }

  /// Creates an op output. The backward closure is kept only when some
  /// input requires a gradient.
  Var<T> make(const char* op, Shape shape, std::vector<T> value, bool requires_grad,
              std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->op = op;
    n->shape = shape;
    n->value = std::move(value);
    check_finite(*n);
    n->requires_grad = requires_grad;
    if (requires_grad) {
      n->backward = std::move(backward);
      tape_.push_back(n);
    }
    return {this, std::move(n)};
  }

  void backward(const Var<T>& root, T seed = T(1)) {
    if (done_) throw Error("Graph::backward called twice without zero_grad()");
    if (root.size() != 1) throw Error("Graph::backward: root must be scalar, got " + root.shape().str());
    if (&root.graph() != this) throw Error("Graph::backward: root belongs to another graph");
    done_ = true;
    if (!root.requires_grad()) return;
    root.node().grad_data()[0] += seed;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  /// Clears all recorded gradients so backward may run again.
  void zero_grad() {
    for (auto& n : tape_) n->grad.clear();
    done_ = false;
  }

  /// Adds the gradients of parameter leaves into Parameter::grad.
  void flush_param_grads() const {
    for (const auto& [p, n] : params_) {
      if (p->grad.size() != p->value.size()) p->grad.assign(p->value.size(), T(0));
      if (n->grad.empty()) continue;
      for (std::size_t i = 0; i < n->grad.size(); ++i) p->grad[i] += n->grad[i];
    }
  }

  std::size_t tape_size() const { return tape_.size(); }

 private:
  static void check_finite(const Node<T>& n) {
    for (T v : n.value) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite value produced by op '") + n.op + "'");
      }
    }
  }

  bool record_params_ = true;
  bool done_ = false;
  std::vector<std::shared_ptr<Node<T>>> tape_;
  std::vector<std::pair<Parameter<T>*, std::shared_ptr<Node<T>>>> params_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> param_cache_;
};

}  // namespace birqa::ad
