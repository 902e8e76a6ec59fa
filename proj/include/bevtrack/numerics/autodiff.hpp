#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape records nodes in creation order, which is a topological order of the
// graph, so backward() is a single reverse sweep that visits every node once.
// Gradients are accumulated (+=) into parents, so shared subexpressions are
// handled correctly. Var is a cheap handle (tape pointer + node index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/numerics/tensor.hpp"

namespace bev::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const;
  std::span<const double> value() const;
  double item() const;
  bool requires_grad() const;
  Tensor tensor() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  // Called with the node's own gradient; must accumulate into parents.
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(const Tensor& t) { return make(t.shape(), t.vec(), t.requires_grad(), nullptr); }
  Var constant(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), false, nullptr);
  }
  Var constant(const Tensor& t) { return make(t.shape(), t.vec(), false, nullptr); }
  Var variable(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), true, nullptr);
  }

  // Registers a node. backward may be null for leaves.
  Var make(Shape shape, std::vector<double> value, bool requires_grad, BackwardFn backward) {
    check_shape(shape);
    if (value.size() != shape_numel(shape))
      throw DimensionError("node value length does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad.assign(n.value.size(), 0.0);
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Node& node(const Var& v) { return nodes_.at(v.index()); }
  const Node& node(const Var& v) const { return nodes_.at(v.index()); }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, or null when it does not require grad.
  double* grad_ptr(const Var& v) {
    auto& n = node(v);
    return n.requires_grad ? n.grad.data() : nullptr;
  }

  void backward(const Var& root) {
    auto& r = node(root);
    if (r.value.size() != 1) throw DimensionError("backward() needs a scalar root");
    if (!r.requires_grad) return;
    r.grad[0] += 1.0;
    for (std::size_t i = root.index() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      // Copy: the backward closure may touch other nodes' grads, never this one.
      n.backward(n.grad);
    }
  }

  Tensor grad(const Var& v) const {
    const auto& n = node(v);
    if (!n.requires_grad) return Tensor(n.shape, 0.0);
    return Tensor(n.shape, n.grad);
  }

  void zero_grad() {
    for (auto& n : nodes_)
      if (n.requires_grad) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

 private:
  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape_->node(*this).shape; }
inline std::size_t Var::size() const { return tape_->node(*this).value.size(); }
inline std::span<const double> Var::value() const { return tape_->node(*this).value; }
inline double Var::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return value()[0];
}
inline bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }
inline Tensor Var::tensor() const {
  const auto& n = tape_->node(*this);
  return Tensor(n.shape, n.value);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw DomainError("operands live on different tapes");
  return *a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline std::size_t cols(const Var& v) { return v.shape().back(); }
inline std::size_t rows(const Var& v) { return v.size() / v.shape().back(); }

template <class Fwd, class Dfdx>
Var unary(const Var& x, Fwd fwd, Dfdx dfdx) {
  Tape& t = *x.tape();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xi = x.index();
  Tape* tp = &t;
  const bool rg = x.requires_grad();
  Var y = t.make(x.shape(), std::move(out), rg, nullptr);
  if (rg) {
    const std::size_t yi = y.index();
    t.node(y).backward = [tp, xi, yi, dfdx](std::span<const double> g) {
      auto& xn = tp->node(Var(tp, xi));
      const auto& yv = tp->node(Var(tp, yi)).value;
      for (std::size_t i = 0; i < g.size(); ++i) xn.grad[i] += g[i] * dfdx(xn.value[i], yv[i]);
    };
  }
  return y;
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var ai = a, bi = b;
  return t.make(a.shape(), std::move(out), rg, [tp, ai, bi](std::span<const double> g) {
    if (double* ga = tp->grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var ai = a, bi = b;
  return t.make(a.shape(), std::move(out), rg, [tp, ai, bi](std::span<const double> g) {
    if (double* ga = tp->grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var ai = a, bi = b;
  return t.make(a.shape(), std::move(out), rg, [tp, ai, bi](std::span<const double> g) {
    auto av = ai.value(), bv = bi.value();
    if (double* ga = tp->grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "div");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var ai = a, bi = b;
  return t.make(a.shape(), std::move(out), rg, [tp, ai, bi](std::span<const double> g) {
    auto av = ai.value(), bv = bi.value();
    if (double* ga = tp->grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

inline Var scale(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}
inline Var add_scalar(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Var neg(const Var& x) { return scale(x, -1.0); }
inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Var sigmoid(const Var& x) {
  return detail::unary(
      x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Var log(const Var& x) {
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Var abs(const Var& x) {
  return detail::unary(x, [](double v) { return std::fabs(v); },
                       [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}
inline Var sqrt(const Var& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return 0.5 / y; });
}
inline Var square(const Var& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// log(sigmoid(x)) and log(1 - sigmoid(x)) computed without cancellation.
inline Var log_sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return v >= 0.0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](double v, double) { return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v)); });
}

// ---- shape ---------------------------------------------------------------

inline Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make(std::move(shape), std::vector<double>(x.value().begin(), x.value().end()),
                x.requires_grad(), [tp, xi](std::span<const double> g) {
                  double* gx = tp->grad_ptr(xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

inline Var transpose(const Var& x) {
  if (x.shape().size() != 2) throw DimensionError("transpose needs a matrix");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xv = x.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({n, m}, std::move(out), x.requires_grad(), [tp, xi, m, n](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

// Concatenation along `axis`; all other extents must match.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != parts[0].tape()) throw DomainError("concat across tapes");
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw DimensionError("concat extent mismatch");
    out_shape[axis] += s[axis];
    rg = rg || p.requires_grad();
  }
  const std::size_t total_axis = out_shape[axis];
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis] * inner;
    auto pv = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len, len, out.begin() + o * total_axis * inner + offset);
    offset += len;
  }
  Tape& t = *parts[0].tape();
  Tape* tp = &t;
  return t.make(std::move(out_shape), std::move(out), rg,
                [tp, parts, outer, inner, total_axis, axis](std::span<const double> g) {
                  std::size_t offset = 0;
                  for (const auto& p : parts) {
                    const std::size_t len = p.shape()[axis] * inner;
                    if (double* gp = tp->grad_ptr(p))
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t k = 0; k < len; ++k)
                          gp[o * len + k] += g[o * total_axis * inner + offset + k];
                    offset += len;
                  }
                });
}

// Selects rows of a matrix (any leading shape flattened to rows x last extent).
inline Var gather_rows(const Var& x, const std::vector<std::size_t>& rows) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  if (rows.empty()) throw DimensionError("gather_rows with empty index");
  for (auto i : rows)
    if (i >= r) throw DimensionError("gather_rows index out of range");
  auto xv = x.value();
  std::vector<double> out(rows.size() * c);
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(xv.begin() + rows[k] * c, c, out.begin() + k * c);
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({rows.size(), c}, std::move(out), x.requires_grad(), [tp, xi, rows, c](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gx[rows[k] * c + j] += g[k * c + j];
  });
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  if (begin >= end || end > c) throw DimensionError("slice_cols range out of bounds");
  const std::size_t w = end - begin;
  auto xv = x.value();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * c + begin + j];
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({r, w}, std::move(out), x.requires_grad(), [tp, xi, r, c, w, begin](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
  });
}

// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  if (begin >= end || end > r) throw DimensionError("slice_rows range out of bounds");
  auto xv = x.value();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          xv.begin() + static_cast<std::ptrdiff_t>(end * c));
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({end - begin, c}, std::move(out), x.requires_grad(), [tp, xi, begin, c](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi) + begin * c;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// x[:, j] * s[j] for a constant per-column factor.
inline Var scale_cols(const Var& x, const std::vector<double>& s) {
  const std::size_t c = detail::cols(x);
  if (s.size() != c) throw DimensionError("scale_cols factor length mismatch");
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s[i % c];
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make(x.shape(), std::move(out), x.requires_grad(), [tp, xi, s, c](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i % c];
  });
}

// Clamp to [lo, hi]; zero gradient where clamped.
inline Var clamp(const Var& x, double lo, double hi) {
  return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                       [lo, hi](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

// Cuts the gradient path; the value is copied.
inline Var detach(const Var& x) {
  return x.tape()->constant(x.shape(), std::vector<double>(x.value().begin(), x.value().end()));
}

// ---- linear algebra ------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw DimensionError("matmul needs matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner extent mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto av = a.value(), bv = b.value();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  const bool rg = a.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var ai = a, bi = b;
  return t.make({m, n}, std::move(out), rg, [tp, ai, bi, m, k, n](std::span<const double> g) {
    auto av = ai.value(), bv = bi.value();
    if (double* ga = tp->grad_ptr(ai))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
  });
}

// x[r, :] + bias for every row r (leading-batch broadcast only).
inline Var add_bias(const Var& x, const Var& bias) {
  Tape& t = detail::same_tape(x, bias);
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  if (bias.size() != c) throw DimensionError("add_bias extent mismatch");
  auto xv = x.value(), bv = bias.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  const bool rg = x.requires_grad() || bias.requires_grad();
  Tape* tp = &t;
  Var xi = x, bi = bias;
  return t.make(x.shape(), std::move(out), rg, [tp, xi, bi, r, c](std::span<const double> g) {
    if (double* gx = tp->grad_ptr(xi))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (double* gb = tp->grad_ptr(bi))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
  });
}

// x @ w + b with x flattened to rows.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  Var x2 = x.shape().size() == 2 ? x : reshape(x, {r, c});
  return add_bias(matmul(x2, w), b);
}

// ---- reductions ----------------------------------------------------------

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({1}, {s}, x.requires_grad(), [tp, xi](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < xi.size(); ++i) gx[i] += g[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Sum over the last axis: [..., C] -> [rows, 1].
inline Var sum_last(const Var& x) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  auto xv = x.value();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += xv[i * c + j];
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({r, 1}, std::move(out), x.requires_grad(), [tp, xi, r, c](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i];
  });
}

// Repeats a [rows, 1] column across `c` columns.
inline Var broadcast_cols(const Var& x, std::size_t c) {
  if (detail::cols(x) != 1) throw DimensionError("broadcast_cols needs a column vector");
  const std::size_t r = detail::rows(x);
  auto xv = x.value();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i];
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  return t.make({r, c}, std::move(out), x.requires_grad(), [tp, xi, r, c](std::span<const double> g) {
    double* gx = tp->grad_ptr(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i] += g[i * c + j];
  });
}

// ---- softmax -------------------------------------------------------------

// Softmax over the last axis. Entries with mask == 0 get probability 0 and
// receive no gradient; a fully masked row yields all zeros.
inline Var softmax(const Var& x, const std::vector<std::uint8_t>* mask = nullptr) {
  const std::size_t c = detail::cols(x), r = detail::rows(x);
  if (mask && mask->size() != x.size()) throw DimensionError("softmax mask size mismatch");
  auto xv = x.value();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!mask || (*mask)[i * c + j]) mx = std::max(mx, xv[i * c + j]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (!mask || (*mask)[i * c + j]) {
        out[i * c + j] = std::exp(xv[i * c + j] - mx);
        z += out[i * c + j];
      }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  Tape& t = *x.tape();
  Tape* tp = &t;
  Var xi = x;
  Var y = t.make(x.shape(), std::move(out), x.requires_grad(), nullptr);
  if (x.requires_grad()) {
    Var yi = y;
    t.node(y).backward = [tp, xi, yi, r, c](std::span<const double> g) {
      double* gx = tp->grad_ptr(xi);
      auto yv = yi.value();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yv[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
      }
    };
  }
  return y;
}

// ---- attention helpers ---------------------------------------------------

// out[m, :] = sum_k w[m, k] * values[m, k, :]; w is [M, K], values [M, K, C].
inline Var weighted_sum(const Var& weights, const Var& values) {
  Tape& t = detail::same_tape(weights, values);
  if (weights.shape().size() != 2 || values.shape().size() != 3 || values.dim(0) != weights.dim(0) ||
      values.dim(1) != weights.dim(1))
    throw DimensionError("weighted_sum expects [M,K] and [M,K,C], got " + shape_str(weights.shape()) + " and " +
                         shape_str(values.shape()));
  const std::size_t m = values.dim(0), k = values.dim(1), c = values.dim(2);
  auto wv = weights.value(), vv = values.value();
  std::vector<double> out(m * c, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double w = wv[i * k + j];
      if (w == 0.0) continue;
      for (std::size_t q = 0; q < c; ++q) out[i * c + q] += w * vv[(i * k + j) * c + q];
    }
  const bool rg = weights.requires_grad() || values.requires_grad();
  Tape* tp = &t;
  Var wi = weights, vi = values;
  return t.make({m, c}, std::move(out), rg, [tp, wi, vi, m, k, c](std::span<const double> g) {
    auto wv = wi.value(), vv = vi.value();
    double* gw = tp->grad_ptr(wi);
    double* gv = tp->grad_ptr(vi);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        if (gw) {
          double s = 0.0;
          for (std::size_t q = 0; q < c; ++q) s += g[i * c + q] * vv[(i * k + j) * c + q];
          gw[i * k + j] += s;
        }
        if (gv) {
          const double w = wv[i * k + j];
          for (std::size_t q = 0; q < c; ++q) gv[(i * k + j) * c + q] += w * g[i * c + q];
        }
      }
  });
}

}  // namespace bev::ad
