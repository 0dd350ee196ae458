#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a handle to a graph node. Operations create new nodes that
// remember their inputs and a backward closure; Tape orders the graph
// reachable from a scalar root and replays the closures in reverse.

#include "vortx/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace vortx::nn {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<T> data) {
    if (std::int64_t(data.size()) != nn::numel(shape))
      throw ShapeError("constant: data length " + std::to_string(data.size()) + " != shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }
  static Tensor zeros(Shape shape) {
    std::vector<T> d(static_cast<std::size_t>(nn::numel(shape)), T(0));
    return constant(std::move(shape), std::move(d));
  }
  static Tensor scalar(T v) { return constant({}, {v}); }
  /// Leaf that accumulates gradients.
  static Tensor leaf(Shape shape, std::vector<T> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.n_->requires_grad = true;
    return t;
  }

  bool defined() const { return bool(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[std::size_t(i < 0 ? int(n_->shape.size()) + i : i)]; }
  int rank() const { return int(n_->shape.size()); }
  std::int64_t numel() const { return std::int64_t(n_->value.size()); }
  const std::vector<T>& value() const { return n_->value; }
  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& grad() const { return n_->grad; }
  std::vector<T>& mutable_grad() { return n_->ensure_grad(); }
  void zero_grad() { n_->grad.clear(); }
  bool requires_grad() const { return n_->requires_grad; }
  T item() const {
    if (n_->value.size() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
    return n_->value[0];
  }
  const NodePtr& node() const { return n_; }

 private:
  NodePtr n_;
};

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording in its scope; ops then keep no references to their inputs.
class NoGrad {
 public:
  NoGrad() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

/// Builds an op node. `backward` is attached only when some input needs a gradient.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode())
    for (const auto& in : inputs)
      if (in.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(n);
}

/// Topologically ordered record of the graph below a root.
template <class T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!root.requires_grad()) return;
    stack.push_back({root.node().get(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<Node<T>*>& order() const { return order_; }

  /// Seeds d(root)/d(root) = 1 and visits every node once in reverse topological order.
  void backward() {
    if (order_.empty()) return;
    Node<T>* root = order_.back();
    if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
    root->ensure_grad()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

template <class T>
void backward(const Tensor<T>& root) {
  Tape<T>(root).backward();
}

// -- elementwise -------------------------------------------------------------

namespace detail {

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx_from_xy) {
  std::vector<T> out(a.value().size());
  const auto& x = a.value();
  parallel_for(std::int64_t(out.size()), [&](std::int64_t i) { out[i] = f(x[i]); }, 1 << 14);
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an, dfdx_from_xy](Node<T>& self) {
    auto& ga = an->ensure_grad();
    const auto& x = an->value;
    const auto& y = self.value;
    const auto& g = self.grad;
    parallel_for(std::int64_t(g.size()), [&](std::int64_t i) { ga[i] += g[i] * dfdx_from_xy(x[i], y[i]); }, 1 << 14);
  });
}

/// b broadcasts over a when b's shape equals a trailing block of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - std::ptrdiff_t(b.size()));
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) shape_fail("add", a.shape(), b.shape());
  const std::size_t nb = b.value().size();
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % nb];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn, nb](Node<T>& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) shape_fail("mul", a.shape(), b.shape());
  const std::size_t nb = b.value().size();
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i % nb];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn, nb](Node<T>& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i % nb];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * an->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// Gradient passes only strictly inside (lo, hi).
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// -- reductions --------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.value()) s += x;
  auto an = a.node();
  return make_op<T>({}, {s}, {a}, [an](Node<T>& self) {
    auto& ga = an->ensure_grad();
    for (auto& g : ga) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

namespace detail {
/// (outer, dim, inner) factorization of a shape around `axis`.
inline void split_axis(const Shape& s, int axis, std::int64_t& outer, int& dim, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
  dim = s[std::size_t(axis)];
  for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
inline int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return axis;
}
}  // namespace detail

/// Sum along one axis; the axis is removed from the shape.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  axis = detail::norm_axis(axis, a.rank());
  std::int64_t outer, inner;
  int dim;
  detail::split_axis(a.shape(), axis, outer, dim, inner);
  Shape os = a.shape();
  os.erase(os.begin() + axis);
  std::vector<T> out(std::size_t(outer * inner), T(0));
  const auto& x = a.value();
  for (std::int64_t o = 0; o < outer; ++o)
    for (int d = 0; d < dim; ++d)
      for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * dim + d) * inner + i];
  auto an = a.node();
  return make_op<T>(os, std::move(out), {a}, [an, outer, dim, inner](Node<T>& self) {
    auto& ga = an->ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (int d = 0; d < dim; ++d)
        for (std::int64_t i = 0; i < inner; ++i) ga[(o * dim + d) * inner + i] += self.grad[o * inner + i];
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  axis = detail::norm_axis(axis, a.rank());
  std::int64_t outer, inner;
  int dim;
  detail::split_axis(a.shape(), axis, outer, dim, inner);
  std::vector<T> out(a.value().size());
  const auto& x = a.value();
  parallel_for(outer * inner, [&](std::int64_t oi) {
    const std::int64_t o = oi / inner, i = oi % inner;
    const std::int64_t base = o * dim * inner + i;
    T m = -std::numeric_limits<T>::infinity();
    for (int d = 0; d < dim; ++d) m = std::max(m, x[base + d * inner]);
    T z = 0;
    for (int d = 0; d < dim; ++d) z += (out[base + d * inner] = std::exp(x[base + d * inner] - m));
    for (int d = 0; d < dim; ++d) out[base + d * inner] /= z;
  }, 4096);
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an, outer, dim, inner](Node<T>& self) {
    auto& ga = an->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    parallel_for(outer * inner, [&](std::int64_t oi) {
      const std::int64_t o = oi / inner, i = oi % inner;
      const std::int64_t base = o * dim * inner + i;
      T dot = 0;
      for (int d = 0; d < dim; ++d) dot += g[base + d * inner] * y[base + d * inner];
      for (int d = 0; d < dim; ++d) ga[base + d * inner] += y[base + d * inner] * (g[base + d * inner] - dot);
    }, 4096);
  });
}

/// Normalizes the last axis to zero mean and unit variance (no affine).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  const int c = a.dim(-1);
  const std::int64_t rows = a.numel() / c;
  std::vector<T> out(a.value().size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const auto& x = a.value();
  parallel_for(rows, [&](std::int64_t r) {
    const T* xr = &x[r * c];
    T mu = 0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= T(c);
    T var = 0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < c; ++j) out[r * c + j] = (xr[j] - mu) * is;
  }, 2048);
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an, c, rows, inv_std = std::move(inv_std)](Node<T>& self) {
    auto& ga = an->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    parallel_for(rows, [&](std::int64_t r) {
      T mg = 0, mgy = 0;
      for (int j = 0; j < c; ++j) {
        mg += g[r * c + j];
        mgy += g[r * c + j] * y[r * c + j];
      }
      mg /= T(c);
      mgy /= T(c);
      for (int j = 0; j < c; ++j)
        ga[r * c + j] += inv_std[r] * (g[r * c + j] - mg - y[r * c + j] * mgy);
    }, 2048);
  });
}

// -- shape ops ---------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  auto an = a.node();
  return make_op<T>(std::move(shape), a.value(), {a}, [an](Node<T>& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  axis = detail::norm_axis(axis, rank);
  Shape os = parts[0].shape();
  os[std::size_t(axis)] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (int(a.size()) != rank) shape_fail("concat", b, a);
    a[std::size_t(axis)] = b[std::size_t(axis)] = 0;
    if (a != b) shape_fail("concat", parts[0].shape(), p.shape());
    os[std::size_t(axis)] += p.dim(axis);
  }
  std::int64_t outer, inner;
  int odim;
  detail::split_axis(os, axis, outer, odim, inner);
  std::vector<T> out(std::size_t(numel(os)));
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int d = p.dim(axis);
    const auto& x = p.value();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * d * inner, d * inner, out.begin() + (o * odim + off) * inner);
    off += d;
  }
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<T>(os, std::move(out), parts, [nodes, offsets, outer, odim, inner, axis](Node<T>& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      auto& ga = nodes[k]->ensure_grad();
      const int d = nodes[k]->shape[std::size_t(axis)];
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < d * inner; ++i) ga[o * d * inner + i] += self.grad[(o * odim + offsets[k]) * inner + i];
    }
  });
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int begin, int end) {
  axis = detail::norm_axis(axis, a.rank());
  const int d = a.dim(axis);
  if (begin < 0 || end > d || begin > end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(a.shape()));
  std::int64_t outer, inner;
  int dim;
  detail::split_axis(a.shape(), axis, outer, dim, inner);
  Shape os = a.shape();
  const int n = end - begin;
  os[std::size_t(axis)] = n;
  std::vector<T> out(std::size_t(outer * n * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(a.value().begin() + (o * dim + begin) * inner, n * inner, out.begin() + o * n * inner);
  auto an = a.node();
  return make_op<T>(os, std::move(out), {a}, [an, outer, dim, inner, begin, n](Node<T>& self) {
    auto& ga = an->ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < n * inner; ++i) ga[(o * dim + begin) * inner + i] += self.grad[o * n * inner + i];
  });
}

/// General axis permutation: out.shape[i] = a.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> perm) {
  const int r = a.rank();
  if (int(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) os[std::size_t(i)] = a.dim(perm[std::size_t(i)]);
  std::vector<std::int64_t> in_strides(std::size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[std::size_t(i)] = in_strides[std::size_t(i + 1)] * a.dim(i + 1);
  // src index for each output element
  const std::int64_t n = a.numel();
  std::vector<std::int64_t> src(static_cast<std::size_t>(n));
  std::vector<int> idx(std::size_t(r), 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t s = 0;
    for (int i = 0; i < r; ++i) s += idx[std::size_t(i)] * in_strides[std::size_t(perm[std::size_t(i)])];
    src[std::size_t(o)] = s;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[std::size_t(i)] < os[std::size_t(i)]) break;
      idx[std::size_t(i)] = 0;
    }
  }
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) out[std::size_t(o)] = a.value()[std::size_t(src[std::size_t(o)])];
  auto an = a.node();
  return make_op<T>(os, std::move(out), {a}, [an, src = std::move(src)](Node<T>& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t o = 0; o < src.size(); ++o) ga[std::size_t(src[o])] += self.grad[o];
  });
}

// -- products ----------------------------------------------------------------

namespace detail {
/// C[M,N] += A[M,K] * B[K,N], rows in parallel.
template <class T>
void gemm_nn(std::int64_t m, int k, int n, const T* a, const T* b, T* c) {
  parallel_for(m, [&](std::int64_t i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + std::int64_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }, 64);
}
/// C[M,K] += G[M,N] * B[K,N]^T
template <class T>
void gemm_nt(std::int64_t m, int n, int k, const T* g, const T* b, T* c) {
  parallel_for(m, [&](std::int64_t i) {
    const T* gi = g + i * n;
    T* ci = c + i * k;
    for (int p = 0; p < k; ++p) {
      const T* bp = b + std::int64_t(p) * n;
      T s = 0;
      for (int j = 0; j < n; ++j) s += gi[j] * bp[j];
      ci[p] += s;
    }
  }, 64);
}
/// C[K,N] += A[M,K]^T * G[M,N]; each output row owned by one thread.
template <class T>
void gemm_tn(std::int64_t m, int k, int n, const T* a, const T* g, T* c) {
  parallel_for(k, [&](std::int64_t p) {
    T* cp = c + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* gi = g + i * n;
      for (int j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }, 2);
}
}  // namespace detail

/// [M,K] x [K,N] -> [M,N]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::int64_t m = a.dim(0);
  const int k = a.dim(1), n = b.dim(1);
  std::vector<T> out(std::size_t(m * n), T(0));
  detail::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  auto an = a.node(), bn = b.node();
  return make_op<T>({int(m), n}, std::move(out), {a, b}, [an, bn, m, k, n](Node<T>& self) {
    if (an->requires_grad) detail::gemm_nt(m, n, k, self.grad.data(), bn->value.data(), an->ensure_grad().data());
    if (bn->requires_grad) detail::gemm_tn(m, k, n, an->value.data(), self.grad.data(), bn->ensure_grad().data());
  });
}

/// Batched product: [B,M,K] x [B,K,N] -> [B,M,N], or with `transpose_b`
/// [B,M,K] x [B,N,K]^T -> [B,M,N].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_fail("bmm", a.shape(), b.shape());
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) shape_fail("bmm", a.shape(), b.shape());
  std::vector<T> out(std::size_t(batch) * m * n, T(0));
  const T* av = a.value().data();
  const T* bv = b.value().data();
  parallel_for(batch, [&](std::int64_t bi) {
    const T* ab = av + bi * m * k;
    const T* bb = bv + bi * k * n;
    T* cb = out.data() + bi * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        T s = 0;
        if (transpose_b)
          for (int p = 0; p < k; ++p) s += ab[i * k + p] * bb[j * k + p];
        else
          for (int p = 0; p < k; ++p) s += ab[i * k + p] * bb[p * n + j];
        cb[i * n + j] = s;
      }
  }, 16);
  auto an = a.node(), bn = b.node();
  return make_op<T>({batch, m, n}, std::move(out), {a, b}, [an, bn, batch, m, k, n, transpose_b](Node<T>& self) {
    const T* g = self.grad.data();
    T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
    T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    const T* av = an->value.data();
    const T* bv = bn->value.data();
    parallel_for(batch, [&](std::int64_t bi) {
      const T* ab = av + bi * m * k;
      const T* bb = bv + bi * k * n;
      const T* gbat = g + bi * m * n;
      if (ga) {
        T* gab = ga + bi * m * k;
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            T s = 0;
            for (int j = 0; j < n; ++j) s += gbat[i * n + j] * (transpose_b ? bb[j * k + p] : bb[p * n + j]);
            gab[i * k + p] += s;
          }
      }
      if (gb) {
        T* gbb = gb + bi * k * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gv = gbat[i * n + j];
            for (int p = 0; p < k; ++p) {
              if (transpose_b)
                gbb[j * k + p] += gv * ab[i * k + p];
              else
                gbb[p * n + j] += gv * ab[i * k + p];
            }
          }
      }
    }, 16);
  });
}

/// Rows as a sparse linear combination of source rows:
/// out[r] = sum over taps t in [offsets[r], offsets[r+1]) of weights[t] * src[rows[t]].
/// Rows without taps are zero.
template <class T>
Tensor<T> weighted_gather(const Tensor<T>& src, std::vector<std::int64_t> offsets, std::vector<std::int32_t> rows,
                          std::vector<T> weights) {
  if (src.rank() != 2) throw ShapeError("weighted_gather: source must be 2-D, got " + shape_str(src.shape()));
  if (offsets.empty() || rows.size() != weights.size() || std::size_t(offsets.back()) != rows.size())
    throw ShapeError("weighted_gather: malformed tap table");
  const int c = src.dim(1);
  const std::int64_t m = std::int64_t(offsets.size()) - 1;
  std::vector<T> out(std::size_t(m * c), T(0));
  const auto& x = src.value();
  parallel_for(m, [&](std::int64_t r) {
    T* o = &out[std::size_t(r * c)];
    for (std::int64_t t = offsets[std::size_t(r)]; t < offsets[std::size_t(r + 1)]; ++t) {
      const T w = weights[std::size_t(t)];
      const T* s = &x[std::size_t(std::int64_t(rows[std::size_t(t)]) * c)];
      for (int j = 0; j < c; ++j) o[j] += w * s[j];
    }
  }, 256);
  auto sn = src.node();
  return make_op<T>({int(m), c}, std::move(out), {src},
                    [sn, c, m, offsets = std::move(offsets), rows = std::move(rows), weights = std::move(weights)](Node<T>& self) {
                      auto& gs = sn->ensure_grad();
                      for (std::int64_t r = 0; r < m; ++r) {
                        const T* g = &self.grad[std::size_t(r * c)];
                        for (std::int64_t t = offsets[std::size_t(r)]; t < offsets[std::size_t(r + 1)]; ++t) {
                          const T w = weights[std::size_t(t)];
                          T* d = &gs[std::size_t(std::int64_t(rows[std::size_t(t)]) * c)];
                          for (int j = 0; j < c; ++j) d[j] += w * g[j];
                        }
                      }
                    });
}

// -- losses ------------------------------------------------------------------

/// Mean binary cross-entropy over unmasked entries, in the stable logit form.
/// An all-masked input yields 0 with zero gradient.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& logits, const std::vector<T>& targets, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = logits.value().size();
  if (targets.size() != n || mask.size() != n)
    throw ShapeError("bce_loss: logits " + shape_str(logits.shape()) + " vs targets/mask of length " +
                     std::to_string(targets.size()) + "/" + std::to_string(mask.size()));
  std::size_t count = 0;
  T total = 0;
  const auto& x = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++count;
    total += std::max(x[i], T(0)) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const T inv = count ? T(1) / T(count) : T(0);
  auto ln = logits.node();
  return make_op<T>({}, {total * inv}, {logits}, [ln, targets, mask, inv](Node<T>& self) {
    auto& g = ln->ensure_grad();
    const T s = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!mask[i]) continue;
      const T x = ln->value[i];
      const T p = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      g[i] += s * (p - targets[i]);
    }
  });
}

/// phi(s) = sign(s) * log(|s| + 1)
template <class T>
inline T log_transform(T s) {
  return s >= T(0) ? std::log1p(s) : -std::log1p(-s);
}

/// Mean |phi(pred) - phi(gt)| over unmasked entries.
template <class T>
Tensor<T> log_tsdf_l1(const Tensor<T>& pred, const std::vector<T>& gt, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = pred.value().size();
  if (gt.size() != n || mask.size() != n) throw ShapeError("log_tsdf_l1: length mismatch with " + shape_str(pred.shape()));
  std::size_t count = 0;
  T total = 0;
  const auto& p = pred.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++count;
    total += std::abs(log_transform(p[i]) - log_transform(gt[i]));
  }
  const T inv = count ? T(1) / T(count) : T(0);
  auto pn = pred.node();
  return make_op<T>({}, {total * inv}, {pred}, [pn, gt, mask, inv](Node<T>& self) {
    auto& g = pn->ensure_grad();
    const T s = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!mask[i]) continue;
      const T x = pn->value[i];
      const T diff = log_transform(x) - log_transform(gt[i]);
      const T sign = diff > T(0) ? T(1) : diff < T(0) ? T(-1) : T(0);
      g[i] += s * sign / (std::abs(x) + T(1));
    }
  });
}

/// Unweighted sum of the six loss terms.
template <class T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace vortx::nn
