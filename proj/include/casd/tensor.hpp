#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "casd/common.hpp"

namespace casd {

// Thread-local autodiff mode. When grads are disabled no graph nodes are
// built and no grad buffers are allocated (inference / data paths).
namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& finite_check_mode() {
  thread_local bool enabled = false;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }
inline void set_grad_enabled(bool v) { detail::grad_mode() = v; }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

// Per-op output finiteness checks. Off by default (the trainer checks the
// losses each step instead); tests and the gradient oracle switch them on.
inline bool finite_checks_enabled() { return detail::finite_check_mode(); }
inline void set_finite_checks(bool v) { detail::finite_check_mode() = v; }

template <typename T>
struct Tensor;

template <typename T>
struct Node {
  std::vector<Tensor<T>> parents;
  std::function<void(const Tensor<T>&)> backward;
  const char* op = "";
};

// Dense row-major n-d array. A Tensor is a cheap handle: copies share the
// value buffer and the grad buffer. Value buffers are never mutated by ops;
// only grad buffers accumulate.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  Tensor() = default;

  static Tensor zeros(Shape s, bool rg = false) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(size_t(numel_of(t.shape)), T(0));
    t.set_requires_grad(rg);
    return t;
  }

  static Tensor full(Shape s, T v, bool rg = false) {
    Tensor t = zeros(std::move(s), rg);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values, bool rg = false) {
    if (int64_t(values.size()) != numel_of(s))
      fail("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.set_requires_grad(rg);
    return t;
  }

  static Tensor scalar(T v, bool rg = false) { return from({1}, {v}, rg); }

  bool defined() const { return bool(data); }
  int rank() const { return int(shape.size()); }
  int64_t numel() const { return numel_of(shape); }

  const T* ptr() const { return data->data(); }
  T* ptr() { return data->data(); }
  const std::vector<T>& vals() const { return *data; }

  T item() const {
    if (numel() != 1) fail("item(): tensor has shape " + shape_str(shape));
    return (*data)[0];
  }

  // row-major index helpers (test / host-side convenience, not hot paths)
  T at(std::initializer_list<int> idx) const { return (*data)[offset_of(idx)]; }
  T& at_mut(std::initializer_list<int> idx) { return (*data)[offset_of(idx)]; }

  void set_requires_grad(bool rg) {
    requires_grad = rg && grad_enabled();
    if (requires_grad && !grad) grad = std::make_shared<std::vector<T>>(size_t(numel()), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  bool all_finite() const {
    for (T v : *data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  // Reverse-mode sweep from a scalar root. Topological order over the graph,
  // then each node's backward accumulates into its parents' grad buffers.
  void backward() {
    if (numel() != 1) fail("backward(): root must be scalar, got " + shape_str(shape));
    if (!requires_grad) fail("backward(): root does not require grad");
    (*grad)[0] += T(1);

    std::vector<Tensor<T>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Tensor<T>, size_t>> stack;
    stack.push_back({*this, 0});
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      if (!t.node || seen.count(t.node.get())) {
        stack.pop_back();
        continue;
      }
      if (next < t.node->parents.size()) {
        Tensor<T> p = t.node->parents[next++];
        if (p.node && !seen.count(p.node.get())) stack.push_back({p, 0});
      } else {
        seen.insert(t.node.get());
        order.push_back(t);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (it->node->backward) it->node->backward(*it);
      if (finite_checks_enabled()) {
        for (const auto& p : it->node->parents)
          if (p.grad)
            for (T v : *p.grad)
              if (!std::isfinite(double(v))) fail(std::string("non-finite gradient after backward of ") + it->node->op);
      }
    }
  }

 private:
  size_t offset_of(std::initializer_list<int> idx) const {
    if (int(idx.size()) != rank()) fail("index rank mismatch for shape " + shape_str(shape));
    size_t off = 0;
    int d = 0;
    for (int i : idx) {
      off = off * size_t(shape[d]) + size_t(i);
      ++d;
    }
    return off;
  }
};

namespace detail {

// Build the output of an op: allocates data, wires the node when any parent
// participates in the graph.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<Tensor<T>> parents,
                         std::function<void(const Tensor<T>&)> backward, const char* op) {
  Tensor<T> out;
  out.shape = std::move(shape);
  out.data = std::make_shared<std::vector<T>>(size_t(numel_of(out.shape)), T(0));
  bool need = false;
  if (grad_mode())
    for (const auto& p : parents)
      if (p.requires_grad) need = true;
  if (need) {
    out.set_requires_grad(true);
    out.node = std::make_shared<Node<T>>();
    out.node->parents = std::move(parents);
    out.node->backward = std::move(backward);
    out.node->op = op;
  }
  return out;
}

template <typename T>
void ensure_grad(const Tensor<T>& t) {
  // grad buffers for graph participants are allocated eagerly in
  // set_requires_grad; this is a guard for hand-built tensors
  if (t.requires_grad && !t.grad) const_cast<Tensor<T>&>(t).grad = std::make_shared<std::vector<T>>(size_t(t.numel()), T(0));
}

template <typename T>
void check_output_finite(const Tensor<T>& t, const char* op) {
  if (!finite_check_mode()) return;
  for (T v : *t.data)
    if (!std::isfinite(double(v))) fail(std::string("non-finite value in output of ") + op);
}

}  // namespace detail

}  // namespace casd
