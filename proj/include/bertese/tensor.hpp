// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices with reverse-mode automatic differentiation.
//
// Every tensor is rank 2 (vectors are 1 x n, scalars 1 x 1). Each primitive
// op allocates a result node that remembers its inputs and a reverse rule.
// The computation record is the DAG reachable from a loss; backward() sorts it
// topologically and replays the reverse rules from the loss to the leaves.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bertese {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t numel() const { return rows * cols; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

[[noreturn]] inline void shape_fail(const char* op, Shape a, Shape b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " +
                   b.str());
}

}  // namespace detail

/// Disables recording of the computation graph for its lifetime.
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

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values,
         bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != rows * cols) {
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + Shape{rows, cols}.str());
    }
    node_->shape = {rows, cols};
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::size_t rows, std::size_t cols,
                      bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<T>(rows * cols, T(0)), requires_grad);
  }
  static Tensor full(std::size_t rows, std::size_t cols, T v,
                     bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<T>(rows * cols, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(1, 1, {v}, requires_grad);
  }
  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values), requires_grad);
  }
  template <typename Rng>
  static Tensor randn(std::size_t rows, std::size_t cols, double stddev,
                      Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(rows * cols);
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(rows, cols, std::move(v), requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  Shape shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T& operator()(std::size_t r, std::size_t c) {
    return node_->value[r * cols() + c];
  }
  T operator()(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: expected a scalar, got " + shape().str());
    }
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op() const { return node_->op; }

  /// Fresh leaf holding a copy of the values; shares nothing with this graph.
  Tensor detach() const {
    return Tensor(rows(), cols(), node_->value, false);
  }
  /// Deep copy keeping the requires_grad flag (used to clone parameters).
  Tensor clone() const {
    return Tensor(rows(), cols(), node_->value, node_->requires_grad);
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in->requires_grad;
  }
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (r x k) * b (k x c).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) detail::shape_fail("matmul", a.shape(), b.shape());
  const std::size_t R = a.rows(), K = a.cols(), C = b.cols();
  std::vector<T> out(R * C, T(0));
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < R; ++i) {
    T* o = out.data() + i * C;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[i * K + k];
      const T* brow = B.data() + k * C;
      for (std::size_t j = 0; j < C; ++j) o[j] += av * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      {R, C}, std::move(out), "matmul", {an, bn}, [an, bn, R, K, C](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              const T* brow = bn->value.data() + k * C;
              const T* grow = g + i * C;
              T s = 0;
              for (std::size_t j = 0; j < C; ++j) s += grow[j] * brow[j];
              an->grad[i * K + k] += s;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              const T av = an->value[i * K + k];
              T* gb = bn->grad.data() + k * C;
              const T* grow = g + i * C;
              for (std::size_t j = 0; j < C; ++j) gb[j] += av * grow[j];
            }
        }
      });
}

/// a (r x k) * b^T where b is (c x k).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::shape_fail("matmul_nt", a.shape(), b.shape());
  const std::size_t R = a.rows(), K = a.cols(), C = b.rows();
  std::vector<T> out(R * C);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      const T* ar = A.data() + i * K;
      const T* br = B.data() + j * K;
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += ar[k] * br[k];
      out[i * C + j] = s;
    }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      {R, C}, std::move(out), "matmul_nt", {an, bn}, [an, bn, R, K, C](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < R; ++i) {
            T* ga = an->grad.data() + i * K;
            for (std::size_t j = 0; j < C; ++j) {
              const T gv = g[i * C + j];
              if (gv == T(0)) continue;
              const T* br = bn->value.data() + j * K;
              for (std::size_t k = 0; k < K; ++k) ga[k] += gv * br[k];
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < R; ++i) {
            const T* ar = an->value.data() + i * K;
            for (std::size_t j = 0; j < C; ++j) {
              const T gv = g[i * C + j];
              if (gv == T(0)) continue;
              T* gb = bn->grad.data() + j * K;
              for (std::size_t k = 0; k < K; ++k) gb[k] += gv * ar[k];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a(i, j);
  auto an = a.node();
  return detail::make_result<T>({C, R}, std::move(out), "transpose", {an},
                                [an, R, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < R; ++i)
                                    for (std::size_t j = 0; j < C; ++j)
                                      an->grad[i * C + j] += self.grad[j * R + i];
                                });
}

// ---------------------------------------------------------------------------
// Elementwise with broadcasting: each dimension must match or be 1.

namespace detail {

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> broadcast_binary(const char* op, const Tensor<T>& a,
                           const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const Shape sa = a.shape(), sb = b.shape();
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    shape_fail(op, sa, sb);
  };
  const std::size_t R = dim(sa.rows, sb.rows), C = dim(sa.cols, sb.cols);
  auto ia = [sa](std::size_t i, std::size_t j) {
    return (sa.rows == 1 ? 0 : i) * sa.cols + (sa.cols == 1 ? 0 : j);
  };
  auto ib = [sb](std::size_t i, std::size_t j) {
    return (sb.rows == 1 ? 0 : i) * sb.cols + (sb.cols == 1 ? 0 : j);
  };
  std::vector<T> out(R * C);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      out[i * C + j] = fwd(A[ia(i, j)], B[ib(i, j)]);
  auto an = a.node(), bn = b.node();
  return make_result<T>({R, C}, std::move(out), op, {an, bn},
                        [an, bn, R, C, ia, ib, da, db](Node<T>& self) {
                          if (an->requires_grad) an->ensure_grad();
                          if (bn->requires_grad) bn->ensure_grad();
                          for (std::size_t i = 0; i < R; ++i)
                            for (std::size_t j = 0; j < C; ++j) {
                              const T g = self.grad[i * C + j];
                              const T x = an->value[ia(i, j)];
                              const T y = bn->value[ib(i, j)];
                              if (an->requires_grad) an->grad[ia(i, j)] += da(g, x, y);
                              if (bn->requires_grad) bn->grad[ib(i, j)] += db(g, x, y);
                            }
                        });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.numel());
  const auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i]);
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), op, {an},
                        [an, deriv](Node<T>& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.value.size(); ++i)
                            an->grad[i] += self.grad[i] * deriv(an->value[i], self.value[i]);
                        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary<T>(
      "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + k * x * x * x);
        const T t = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  auto an = a.node();
  return detail::make_result<T>({1, 1}, {s}, "sum", {an}, [an](Node<T>& self) {
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor " + a.shape().str());
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Row-wise minimum (r x c -> r x 1). Ties resolve to the lowest column.
template <typename T>
Tensor<T> min_cols(const Tensor<T>& a) {
  if (a.cols() == 0) throw ShapeError("min_cols: no columns in " + a.shape().str());
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R);
  std::vector<std::size_t> arg(R);
  for (std::size_t i = 0; i < R; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (a(i, j) < a(i, best)) best = j;
    arg[i] = best;
    out[i] = a(i, best);
  }
  auto an = a.node();
  return detail::make_result<T>({R, 1}, std::move(out), "min_cols", {an},
                                [an, arg, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < arg.size(); ++i)
                                    an->grad[i * C + arg[i]] += self.grad[i];
                                });
}

/// Maximum over all entries (-> 1 x 1). Ties resolve to the lowest flat index.
template <typename T>
Tensor<T> max_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("max_all: empty tensor");
  const auto A = a.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < A.size(); ++i)
    if (A[i] > A[best]) best = i;
  auto an = a.node();
  return detail::make_result<T>({1, 1}, {A[best]}, "max_all", {an},
                                [an, best](Node<T>& self) {
                                  an->ensure_grad();
                                  an->grad[best] += self.grad[0];
                                });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, a(i, j));
    T z = 0;
    for (std::size_t j = 0; j < C; ++j) {
      out[i * C + j] = std::exp(a(i, j) - mx);
      z += out[i * C + j];
    }
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] /= z;
  }
  auto an = a.node();
  return detail::make_result<T>({R, C}, std::move(out), "softmax_rows", {an},
                                [an, R, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < R; ++i) {
                                    const T* p = self.value.data() + i * C;
                                    const T* g = self.grad.data() + i * C;
                                    T dot = 0;
                                    for (std::size_t j = 0; j < C; ++j) dot += p[j] * g[j];
                                    for (std::size_t j = 0; j < C; ++j)
                                      an->grad[i * C + j] += p[j] * (g[j] - dot);
                                  }
                                });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, a(i, j));
    T z = 0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(a(i, j) - mx);
    const T lz = mx + std::log(z);
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] = a(i, j) - lz;
  }
  auto an = a.node();
  return detail::make_result<T>({R, C}, std::move(out), "log_softmax_rows", {an},
                                [an, R, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < R; ++i) {
                                    const T* lp = self.value.data() + i * C;
                                    const T* g = self.grad.data() + i * C;
                                    T gs = 0;
                                    for (std::size_t j = 0; j < C; ++j) gs += g[j];
                                    for (std::size_t j = 0; j < C; ++j)
                                      an->grad[i * C + j] += g[j] - std::exp(lp[j]) * gs;
                                  }
                                });
}

/// Layer normalization over each row with affine gamma/beta (1 x c each).
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, T eps = T(1e-12)) {
  const std::size_t R = x.rows(), C = x.cols();
  if (gamma.shape() != Shape{1, C}) detail::shape_fail("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{1, C}) detail::shape_fail("layer_norm", x.shape(), beta.shape());
  std::vector<T> xhat(R * C), out(R * C), rstd(R);
  const auto G = gamma.data();
  const auto Bt = beta.data();
  for (std::size_t i = 0; i < R; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < C; ++j) mu += x(i, j);
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t j = 0; j < C; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<T>(C);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < C; ++j) {
      xhat[i * C + j] = (x(i, j) - mu) * rstd[i];
      out[i * C + j] = xhat[i * C + j] * G[j] + Bt[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      {R, C}, std::move(out), "layer_norm", {xn, gn, bn},
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), R, C](Node<T>& self) {
        const T* g = self.grad.data();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::size_t i = 0; i < R; ++i) {
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t j = 0; j < C; ++j) {
            const T gij = g[i * C + j];
            if (gn->requires_grad) gn->grad[j] += gij * xhat[i * C + j];
            if (bn->requires_grad) bn->grad[j] += gij;
            const T dxh = gij * gn->value[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[i * C + j];
          }
          if (!xn->requires_grad) continue;
          const T inv_c = T(1) / static_cast<T>(C);
          for (std::size_t j = 0; j < C; ++j) {
            const T dxh = g[i * C + j] * gn->value[j];
            xn->grad[i * C + j] +=
                rstd[i] * (dxh - inv_c * sum_dxhat - xhat[i * C + j] * inv_c * sum_dxhat_xhat);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows of `table` selected by `ids` (n x c). Backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t C = table.cols();
  std::vector<T> out(ids.size() * C);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) +
                              " outside table " + table.shape().str());
    }
    std::copy_n(table.data().begin() + ids[i] * C, C, out.begin() + i * C);
  }
  auto tn = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result<T>({ids.size(), C}, std::move(out), "gather_rows", {tn},
                                [tn, idx = std::move(idx), C](Node<T>& self) {
                                  tn->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < C; ++j)
                                      tn->grad[idx[i] * C + j] += self.grad[i * C + j];
                                });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + a.shape().str());
  }
  const std::size_t C = a.cols();
  std::vector<T> out(a.data().begin() + start * C, a.data().begin() + (start + count) * C);
  auto an = a.node();
  return detail::make_result<T>({count, C}, std::move(out), "slice_rows", {an},
                                [an, start, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t k = 0; k < self.grad.size(); ++k)
                                    an->grad[start * C + k] += self.grad[k];
                                });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + a.shape().str());
  }
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * count);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a(i, start + j);
  auto an = a.node();
  return detail::make_result<T>({R, count}, std::move(out), "slice_cols", {an},
                                [an, start, count, R, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < R; ++i)
                                    for (std::size_t j = 0; j < count; ++j)
                                      an->grad[i * C + start + j] += self.grad[i * count + j];
                                });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts.front().rows();
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.rows() != R) detail::shape_fail("concat_cols", parts.front().shape(), p.shape());
    C += p.cols();
  }
  std::vector<T> out(R * C);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * C + off + j] = p(i, j);
    off += p.cols();
    nodes.push_back(p.node());
  }
  return detail::make_result<T>({R, C}, std::move(out), "concat_cols", nodes,
                                [R, C](Node<T>& self) {
                                  std::size_t o = 0;
                                  for (auto& in : self.inputs) {
                                    const std::size_t w = in->shape.cols;
                                    if (in->requires_grad) {
                                      in->ensure_grad();
                                      for (std::size_t i = 0; i < R; ++i)
                                        for (std::size_t j = 0; j < w; ++j)
                                          in->grad[i * w + j] += self.grad[i * C + o + j];
                                    }
                                    o += w;
                                  }
                                });
}

/// Column `col` of every row (r x c -> r x 1).
template <typename T>
Tensor<T> select_col(const Tensor<T>& a, std::size_t col) {
  if (col >= a.cols()) {
    throw ShapeError("select_col: column " + std::to_string(col) + " outside " +
                     a.shape().str());
  }
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R);
  for (std::size_t i = 0; i < R; ++i) out[i] = a(i, col);
  auto an = a.node();
  return detail::make_result<T>({R, 1}, std::move(out), "select_col", {an},
                                [an, col, R, C](Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < R; ++i)
                                    an->grad[i * C + col] += self.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Distances and losses

/// Pairwise squared Euclidean distances between rows of a (n x d) and b (m x d).
template <typename T>
Tensor<T> sq_dist_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::shape_fail("sq_dist_rows", a.shape(), b.shape());
  const std::size_t N = a.rows(), M = b.rows(), D = a.cols();
  std::vector<T> out(N * M);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < D; ++k) {
        const T diff = A[i * D + k] - B[j * D + k];
        s += diff * diff;
      }
      out[i * M + j] = s;
    }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      {N, M}, std::move(out), "sq_dist_rows", {an, bn}, [an, bn, N, M, D](Node<T>& self) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            const T g = self.grad[i * M + j];
            if (g == T(0)) continue;
            for (std::size_t k = 0; k < D; ++k) {
              const T diff = an->value[i * D + k] - bn->value[j * D + k];
              if (an->requires_grad) an->grad[i * D + k] += T(2) * g * diff;
              if (bn->requires_grad) bn->grad[j * D + k] -= T(2) * g * diff;
            }
          }
      });
}

/// Mean cross-entropy of rows of `logits` against integer targets.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + logits.shape().str());
  }
  const auto lp = log_softmax_rows(logits);
  const std::size_t R = lp.rows(), C = lp.cols();
  T s = 0;
  for (std::size_t i = 0; i < R; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= C) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside " + std::to_string(C) + " classes");
    }
    s -= lp(i, targets[i]);
  }
  auto ln = lp.node();
  std::vector<int> tg(targets.begin(), targets.end());
  return detail::make_result<T>({1, 1}, {s / static_cast<T>(R)}, "cross_entropy", {ln},
                                [ln, tg = std::move(tg), C](Node<T>& self) {
                                  ln->ensure_grad();
                                  const T w = self.grad[0] / static_cast<T>(tg.size());
                                  for (std::size_t i = 0; i < tg.size(); ++i)
                                    ln->grad[i * C + tg[i]] -= w;
                                });
}

// ---------------------------------------------------------------------------
// Discrete selections

/// Index of the largest entry; lowest index on ties.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Straight-through hardmax: forward emits the one-hot of argmax(probs)
/// (lowest index on ties), backward passes the upstream gradient unchanged.
template <typename T>
Tensor<T> ste_hardmax(const Tensor<T>& probs) {
  if (probs.numel() == 0) throw std::invalid_argument("ste_hardmax: empty vector");
  if (probs.rows() != 1 && probs.cols() != 1) {
    throw ShapeError("ste_hardmax: expected a vector, got " + probs.shape().str());
  }
  double total = 0;
  for (T p : probs.data()) {
    if (p < T(0)) throw std::invalid_argument("ste_hardmax: negative probability");
    total += static_cast<double>(p);
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw std::invalid_argument("ste_hardmax: probabilities sum to " + std::to_string(total));
  }
  std::vector<T> out(probs.numel(), T(0));
  out[argmax(probs.data())] = T(1);
  auto pn = probs.node();
  return detail::make_result<T>(probs.shape(), std::move(out), "ste_hardmax", {pn},
                                [pn](Node<T>& self) {
                                  pn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    pn->grad[i] += self.grad[i];
                                });
}

/// For each row of q, the index of the nearest row of table (squared
/// Euclidean distance, exhaustive scan, lowest index on ties).
template <typename T>
std::vector<int> nearest_rows(const Tensor<T>& q, const Tensor<T>& table) {
  if (q.cols() != table.cols()) detail::shape_fail("nearest_rows", q.shape(), table.shape());
  if (table.rows() == 0) throw ShapeError("nearest_rows: empty table");
  const std::size_t D = q.cols();
  std::vector<int> out(q.rows());
  const auto Q = q.data();
  const auto B = table.data();
  for (std::size_t i = 0; i < q.rows(); ++i) {
    T best = std::numeric_limits<T>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < table.rows(); ++j) {
      T s = 0;
      for (std::size_t k = 0; k < D; ++k) {
        const T diff = Q[i * D + k] - B[j * D + k];
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = static_cast<int>(j);
      }
    }
    out[i] = arg;
  }
  return out;
}

/// Straight-through snap: forward replaces each row of q by its nearest row
/// of table; backward passes the gradient to q unchanged.
template <typename T>
Tensor<T> ste_snap_rows(const Tensor<T>& q, const Tensor<T>& table,
                        std::span<const int> chosen) {
  if (chosen.size() != q.rows()) {
    throw ShapeError("ste_snap_rows: " + std::to_string(chosen.size()) +
                     " indices for " + q.shape().str());
  }
  const std::size_t D = q.cols();
  std::vector<T> out(q.numel());
  for (std::size_t i = 0; i < chosen.size(); ++i)
    std::copy_n(table.data().begin() + chosen[i] * D, D, out.begin() + i * D);
  auto qn = q.node();
  return detail::make_result<T>(q.shape(), std::move(out), "ste_snap_rows", {qn},
                                [qn](Node<T>& self) {
                                  qn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    qn->grad[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> ste_snap_rows(const Tensor<T>& q, const Tensor<T>& table) {
  const auto chosen = nearest_rows(q, table);
  return ste_snap_rows(q, table, std::span<const int>(chosen));
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates dLoss/dLeaf into every reachable leaf with requires_grad.
/// Intermediate gradients are reset before and released after the pass, so
/// repeated calls on the same graph add the same contribution again.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + loss.shape().str());
  }
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is post-order: inputs before consumers.
  for (Node<T>* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  for (Node<T>* n : order)
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Max over all parameter coordinates of
/// |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
/// `fn` must rebuild its graph from the current parameter values on each call.
template <typename T, typename Fn>
double grad_check(Fn&& fn, std::vector<Tensor<T>> params, double epsilon = 1e-4) {
  for (auto& p : params) p.zero_grad();
  {
    const Tensor<T> loss = fn();
    backward(loss);
  }
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<T> analytic(p.numel(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(epsilon);
      const T up = fn().item();
      values[i] = saved - static_cast<T>(epsilon);
      const T down = fn().item();
      values[i] = saved;
      const double numeric = static_cast<double>((up - down) / static_cast<T>(2.0 * epsilon));
      const double a = static_cast<double>(analytic[i]);
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace bertese
