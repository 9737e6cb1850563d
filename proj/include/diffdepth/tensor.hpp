#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffdepth/rng.hpp"

namespace diffdepth {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("shape_numel: negative dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::runtime_error(op + ": " + detail) {}
};

namespace detail {
inline thread_local bool grad_enabled = true;
inline std::atomic<std::int64_t> nodes_created{0};
inline bool strict_finite = false;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

/// Total number of graph nodes created so far; lets tests assert that
/// no-grad regions really build no graph.
inline std::int64_t graph_nodes_created() {
  return detail::nodes_created.load(std::memory_order_relaxed);
}

/// When on, ops throw on non-finite inputs instead of propagating NaN/inf.
inline bool& strict_finite_mode() { return detail::strict_finite; }

/// RAII guard disabling graph construction (teacher passes, inference, data prep).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
struct TensorImpl {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;  // must not capture its own impl
};

template <typename S>
typename TensorImpl<S>::Array& ensure_grad(TensorImpl<S>& t) {
  if (t.grad.size() == 0) t.grad = TensorImpl<S>::Array::Zero(t.value.size());
  return t.grad;
}

// Dense row-major tensor with reverse-mode autodiff. The graph is rebuilt on
// every forward pass: each op records its parents plus a backward closure on
// the freshly created node. backward() releases the non-leaf structure it
// walked, so intermediate memory is reclaimed after each step.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = typename TensorImpl<S>::Array;
  using Map = Eigen::Map<Array>;
  using CMap = Eigen::Map<const Array>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = shape;
    t.impl_->value = Array::Zero(shape_numel(shape));
    return t;
  }

  static Tensor full(const Shape& shape, S v) {
    Tensor t = zeros(shape);
    t.impl_->value.setConstant(v);
    return t;
  }

  static Tensor scalar(S v) { return full({}, v); }

  static Tensor from_vector(const Shape& shape, const std::vector<S>& data) {
    Tensor t = zeros(shape);
    if (static_cast<std::int64_t>(data.size()) != t.size())
      throw ShapeError("from_vector", "got " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t.impl_->value[i] = data[static_cast<std::size_t>(i)];
    return t;
  }

  static Tensor randn(const Shape& shape, Rng& rng) {
    Tensor t = zeros(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.impl_->value[i] = static_cast<S>(rng.normal());
    return t;
  }

  static Tensor rand_uniform(const Shape& shape, Rng& rng, S lo, S hi) {
    Tensor t = zeros(shape);
    for (std::int64_t i = 0; i < t.size(); ++i)
      t.impl_->value[i] = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const {
    check_defined("shape");
    return impl_->shape;
  }

  int rank() const { return static_cast<int>(shape().size()); }

  int dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) throw ShapeError("dim", "axis out of range");
    return s[static_cast<std::size_t>(i)];
  }

  std::int64_t size() const {
    check_defined("size");
    return impl_->value.size();
  }

  S* data() {
    check_defined("data");
    return impl_->value.data();
  }
  const S* data() const {
    check_defined("data");
    return impl_->value.data();
  }

  Map array() {
    check_defined("array");
    return Map(impl_->value.data(), impl_->value.size());
  }
  CMap array() const {
    check_defined("array");
    return CMap(impl_->value.data(), impl_->value.size());
  }

  S item() const {
    if (size() != 1) throw ShapeError("item", "tensor has " + std::to_string(size()) + " elements");
    return impl_->value[0];
  }

  /// Row-major element access (rank must match the index count).
  S at(const std::vector<int>& idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ShapeError("at", "index rank mismatch");
    std::int64_t off = 0;
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (idx[k] < 0 || idx[k] >= s[k]) throw ShapeError("at", "index out of range");
      off = off * s[k] + idx[k];
    }
    return impl_->value[off];
  }

  bool requires_grad() const {
    check_defined("requires_grad");
    return impl_->requires_grad;
  }

  /// Marks a leaf as trainable. Only valid on graph-free tensors.
  Tensor& set_requires_grad(bool v = true) {
    check_defined("set_requires_grad");
    if (v && !impl_->parents.empty())
      throw std::logic_error("set_requires_grad: only leaf tensors can be marked trainable");
    impl_->requires_grad = v;
    return *this;
  }

  bool is_leaf() const {
    check_defined("is_leaf");
    return impl_->parents.empty();
  }

  bool has_grad() const {
    check_defined("has_grad");
    return impl_->grad.size() != 0;
  }

  /// Accumulated gradient of a leaf (zeros if backward never reached it).
  Tensor grad() const {
    check_defined("grad");
    Tensor g = zeros(impl_->shape);
    if (impl_->grad.size() != 0) g.impl_->value = impl_->grad;
    return g;
  }

  void zero_grad() {
    check_defined("zero_grad");
    impl_->grad.resize(0);
  }

  /// Value copy detached from the graph.
  Tensor detach() const {
    check_defined("detach");
    Tensor t = zeros(impl_->shape);
    t.impl_->value = impl_->value;
    return t;
  }

  /// In-place value update for optimizers; forbidden on graph nodes.
  void update_value(const Array& v) {
    check_defined("update_value");
    if (!impl_->parents.empty()) throw std::logic_error("update_value: tensor is an interior graph node");
    if (v.size() != impl_->value.size()) throw ShapeError("update_value", "size mismatch");
    impl_->value = v;
  }

  /// Reverse-mode sweep from a scalar. Non-leaf grads are freed afterwards;
  /// leaf grads accumulate across calls until zero_grad().
  void backward() const {
    check_defined("backward");
    if (size() != 1) throw ShapeError("backward", "root must be a scalar, got " + shape_str(impl_->shape));

    // Iterative post-order over the parent DAG: children before parents in `order`.
    std::vector<TensorImpl<S>*> order;
    std::unordered_set<const TensorImpl<S>*> seen;
    std::vector<std::pair<TensorImpl<S>*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->parents.size()) {
        TensorImpl<S>* p = top.first->parents[top.second++].get();
        if (!p->parents.empty() && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(top.first);
        stack.pop_back();
      }
    }

    // Fresh pass: interior grads are scratch, only leaves persist.
    for (auto* n : order)
      if (!n->parents.empty()) n->grad.resize(0);
    ensure_grad(*impl_) += S(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorImpl<S>* n = *it;
      if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }

    // Drop interior scratch grads and the recorded graph so memory is
    // reclaimed even while the Python-style "loss tensor" is still alive.
    for (auto* n : order) {
      if (!n->parents.empty()) {
        n->grad.resize(0);
        n->parents.clear();
        n->backward_fn = nullptr;
      }
    }
  }

  std::shared_ptr<TensorImpl<S>>& impl_ptr() {
    check_defined("impl_ptr");
    return impl_;
  }
  const std::shared_ptr<TensorImpl<S>>& impl_ptr() const {
    check_defined("impl_ptr");
    return impl_;
  }

 private:
  void check_defined(const char* what) const {
    if (!impl_) throw std::logic_error(std::string(what) + ": tensor is undefined");
  }

  std::shared_ptr<TensorImpl<S>> impl_;
};

namespace detail {

template <typename S>
void check_finite(const char* op, const Tensor<S>& t) {
  if (strict_finite && !t.array().isFinite().all())
    throw std::runtime_error(std::string(op) + ": non-finite input in strict mode");
}

/// Records parents + backward closure on `out` when grad mode is on and at
/// least one parent participates in a graph. The closure receives the output
/// node itself, so it never needs to capture its own impl (no ref cycles).
template <typename S, typename F>
void attach(Tensor<S>& out, std::vector<std::shared_ptr<TensorImpl<S>>> parents, F&& fn) {
  if (!grad_enabled) return;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return;
  auto& impl = *out.impl_ptr();
  impl.requires_grad = true;
  impl.parents = std::move(parents);
  impl.backward_fn = std::forward<F>(fn);
  nodes_created.fetch_add(1, std::memory_order_relaxed);
}

template <typename S>
bool wants_grad(const std::shared_ptr<TensorImpl<S>>& p) {
  return p->requires_grad;
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("add", a, b);
  detail::check_finite("add", a);
  detail::check_finite("add", b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() + b.array();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {ai, bi}, [ai, bi](TensorImpl<S>& self) {
    if (detail::wants_grad(ai)) ensure_grad(*ai) += self.grad;
    if (detail::wants_grad(bi)) ensure_grad(*bi) += self.grad;
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  detail::check_finite("sub", a);
  detail::check_finite("sub", b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() - b.array();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {ai, bi}, [ai, bi](TensorImpl<S>& self) {
    if (detail::wants_grad(ai)) ensure_grad(*ai) += self.grad;
    if (detail::wants_grad(bi)) ensure_grad(*bi) -= self.grad;
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("mul", a, b);
  detail::check_finite("mul", a);
  detail::check_finite("mul", b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() * b.array();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {ai, bi}, [ai, bi](TensorImpl<S>& self) {
    if (detail::wants_grad(ai)) ensure_grad(*ai) += self.grad * bi->value;
    if (detail::wants_grad(bi)) ensure_grad(*bi) += self.grad * ai->value;
  });
  return out;
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("div", a, b);
  detail::check_finite("div", a);
  detail::check_finite("div", b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() / b.array();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {ai, bi}, [ai, bi](TensorImpl<S>& self) {
    if (detail::wants_grad(ai)) ensure_grad(*ai) += self.grad / bi->value;
    if (detail::wants_grad(bi)) ensure_grad(*bi) -= self.grad * ai->value / bi->value.square();
  });
  return out;
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& a, S c) {
  detail::check_finite("scalar_mul", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() * c;
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai, c](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad * c; });
  return out;
}

template <typename S>
Tensor<S> scalar_add(const Tensor<S>& a, S c) {
  detail::check_finite("scalar_add", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array() + c;
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad; });
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scalar_mul(a, S(-1));
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> exp_(const Tensor<S>& a) {
  detail::check_finite("exp", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().exp();
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad * self.value; });
  return out;
}

template <typename S>
Tensor<S> log_(const Tensor<S>& a) {
  detail::check_finite("log", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().log();
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad / ai->value; });
  return out;
}

template <typename S>
Tensor<S> sqrt_(const Tensor<S>& a) {
  detail::check_finite("sqrt", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().sqrt();
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * S(0.5) / self.value;
  });
  return out;
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  detail::check_finite("square", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().square();
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * S(2) * ai->value;
  });
  return out;
}

/// |x| with the subgradient-at-zero convention sign(0) = 0.
template <typename S>
Tensor<S> abs_(const Tensor<S>& a) {
  detail::check_finite("abs", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().abs();
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * ai->value.sign();
  });
  return out;
}

/// Numerically stable logistic; the derivative uses the cached output.
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  detail::check_finite("sigmoid", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = S(0.5) * ((S(0.5) * a.array()).tanh() + S(1));
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * self.value * (S(1) - self.value);
  });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  detail::check_finite("relu", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().max(S(0));
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * (ai->value > S(0)).template cast<S>();
  });
  return out;
}

template <typename S>
Tensor<S> elu(const Tensor<S>& a) {
  detail::check_finite("elu", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = (a.array() > S(0)).select(a.array(), a.array().exp() - S(1));
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) {
    // d/dx = 1 for x > 0, exp(x) = out + 1 otherwise
    using Arr = typename TensorImpl<S>::Array;
    ensure_grad(*ai) +=
        self.grad * (ai->value > S(0)).select(Arr::Ones(self.value.size()), self.value + S(1));
  });
  return out;
}

/// clamp(a, lo, hi); gradient passes only strictly inside the interval.
template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  detail::check_finite("clamp", a);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = a.array().max(lo).min(hi);
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai, lo, hi](TensorImpl<S>& self) {
    ensure_grad(*ai) += self.grad * (ai->value > lo && ai->value < hi).template cast<S>();
  });
  return out;
}

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& a, S lo) {
  return clamp(a, lo, std::numeric_limits<S>::infinity());
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  detail::check_finite("sum", a);
  Tensor<S> out = Tensor<S>::scalar(a.array().sum());
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad[0]; });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  detail::check_finite("mean", a);
  if (a.size() == 0) throw ShapeError("mean", "empty tensor");
  const S inv = S(1) / static_cast<S>(a.size());
  Tensor<S> out = Tensor<S>::scalar(a.array().sum() * inv);
  auto ai = a.impl_ptr();
  detail::attach(out, {ai}, [ai, inv](TensorImpl<S>& self) { ensure_grad(*ai) += self.grad[0] * inv; });
  return out;
}

// ---------------------------------------------------------------------------
// Comparisons (graph-free masks)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> lt_mask(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = (a.array() < c).template cast<S>();
  return out;
}

template <typename S>
Tensor<S> gt_mask(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = (a.array() > c).template cast<S>();
  return out;
}

template <typename S>
Tensor<S> le_mask(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("le_mask", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = (a.array() <= b.array()).template cast<S>();
  return out;
}

template <typename S>
Tensor<S> le_mask(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.array() = (a.array() <= c).template cast<S>();
  return out;
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) {
  return div(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S c) {
  return scalar_mul(a, c);
}
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) {
  return scalar_mul(a, c);
}
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, S c) {
  return scalar_add(a, c);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, S c) {
  return scalar_add(a, S(-c));
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) {
  return neg(a);
}

/// c - a
template <typename S>
Tensor<S> rsub(S c, const Tensor<S>& a) {
  return scalar_add(neg(a), c);
}

}  // namespace diffdepth
