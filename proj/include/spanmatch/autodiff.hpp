#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spanmatch/error.hpp"
#include "spanmatch/matrix.hpp"

// Matrix-granular reverse-mode differentiation. Every op records one node
// holding its forward value; backward() walks the nodes in reverse creation
// order, which is a valid topological order because nodes only reference
// earlier nodes.
namespace spanmatch::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var leaf(Matrix value) { return push(std::move(value), true, nullptr); }

  Var push(Matrix value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of the last backward() target with respect to v. Zero-filled
  // when nothing flowed into v.
  Matrix grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  void backward(Var loss) {
    check_owned(loss);
    if (backward_done_) throw InvariantError("backward called twice without reset");
    const Node& out = nodes_[loss.id];
    if (out.value.rows() != 1 || out.value.cols() != 1) {
      throw InvariantError("backward: loss is not a scalar (" + out.value.shape_string() + ")");
    }
    backward_done_ = true;
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  // Clears accumulated gradients so backward() may run again.
  void reset_gradients() {
    for (auto& n : nodes_) n.grad = Matrix{};
    backward_done_ = false;
  }

  // Accessors used by op backward closures.
  const Matrix& value_at(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad_at(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad_at(std::size_t id) const { return nodes_[id].requires_grad; }
  Matrix& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw InvariantError("variable does not belong to this tape");
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    check_owned(v);
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = vars.begin()->tape;
  for (const Var& v : vars) {
    if (v.tape != t || t == nullptr) throw InvariantError("mixing variables from different tapes");
    t->check_owned(v);
  }
  return *t;
}

inline void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

inline const Matrix& value(Var v) { return v.tape->value(v); }

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of({a, b});
  Matrix out = spanmatch::matmul(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    if (tp.needs_grad_at(a)) gemm_bt_acc(g, tp.value_at(b), tp.grad_slot(a));
    if (tp.needs_grad_at(b)) gemm_at_acc(tp.value_at(a), g, tp.grad_slot(b));
  });
}

// a * b^T
inline Var matmul_bt(Var a, Var b) {
  Tape& t = detail::tape_of({a, b});
  Matrix out = spanmatch::matmul_bt(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    if (tp.needs_grad_at(a)) gemm_acc(g, tp.value_at(b), tp.grad_slot(a));
    if (tp.needs_grad_at(b)) gemm_at_acc(g, tp.value_at(a), tp.grad_slot(b));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of({a, b});
  require_same_shape(t.value(a), t.value(b), "add");
  Matrix out = t.value(a);
  detail::add_into(out, t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    if (tp.needs_grad_at(a)) detail::add_into(tp.grad_slot(a), g);
    if (tp.needs_grad_at(b)) detail::add_into(tp.grad_slot(b), g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of({a, b});
  require_same_shape(t.value(a), t.value(b), "sub");
  Matrix out = t.value(a);
  auto o = out.values();
  auto bv = t.value(b).values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    if (tp.needs_grad_at(a)) detail::add_into(tp.grad_slot(a), g);
    if (tp.needs_grad_at(b)) {
      auto d = tp.grad_slot(b).values();
      auto gv = g.values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gv[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tape& t = *a.tape;
  t.check_owned(a);
  Matrix out = t.value(a);
  for (double& v : out.values()) v *= factor;
  return t.push(std::move(out), t.requires_grad(a), [a = a.id, factor](Tape& tp, std::size_t self) {
    auto d = tp.grad_slot(a).values();
    auto g = tp.grad_at(self).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
  });
}

// Elementwise product with a constant mask (dropout).
inline Var mul_const(Var a, const Matrix& mask) {
  Tape& t = *a.tape;
  t.check_owned(a);
  require_same_shape(t.value(a), mask, "mul_const");
  Matrix out = t.value(a);
  auto o = out.values();
  auto mv = mask.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mv[i];
  return t.push(std::move(out), t.requires_grad(a), [a = a.id, mask](Tape& tp, std::size_t self) {
    auto d = tp.grad_slot(a).values();
    auto g = tp.grad_at(self).values();
    auto mv = mask.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += mv[i] * g[i];
  });
}

// Exact erf-based GELU.
inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Var gelu(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  Matrix out = t.value(a);
  for (double& v : out.values()) v = gelu_value(v);
  return t.push(std::move(out), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    auto d = tp.grad_slot(a).values();
    auto g = tp.grad_at(self).values();
    auto x = tp.value_at(a).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gelu_derivative(x[i]) * g[i];
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise LayerNorm over the feature axis with 1 x d gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias) {
  Tape& t = detail::tape_of({x, gain, bias});
  const Matrix& xv = t.value(x);
  const std::size_t n = xv.rows(), d = xv.cols();
  if (t.value(gain).rows() != 1 || t.value(gain).cols() != d || !t.value(bias).same_shape(t.value(gain))) {
    throw InvariantError("layer_norm: affine parameters must be 1x" + std::to_string(d));
  }
  Matrix xhat(n, d);
  Matrix inv_std(n, 1);
  Matrix out(n, d);
  const auto gv = t.value(gain).row(0);
  const auto bv = t.value(bias).row(0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = xv.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(i, 0) = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (row[j] - mean) * is;
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.push(std::move(out), rg,
                [x = x.id, gain = gain.id, bias = bias.id, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.grad_at(self);
                  const std::size_t n = g.rows(), d = g.cols();
                  if (tp.needs_grad_at(gain)) {
                    Matrix& gg = tp.grad_slot(gain);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gg(0, j) += g(i, j) * xhat(i, j);
                  }
                  if (tp.needs_grad_at(bias)) {
                    Matrix& gb = tp.grad_slot(bias);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gb(0, j) += g(i, j);
                  }
                  if (tp.needs_grad_at(x)) {
                    const auto gv = tp.value_at(gain).row(0);
                    Matrix& gx = tp.grad_slot(x);
                    std::vector<double> dxhat(d);
                    for (std::size_t i = 0; i < n; ++i) {
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = g(i, j) * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat(i, j);
                      }
                      mean_dxhat /= static_cast<double>(d);
                      mean_dxhat_xhat /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        gx(i, j) += inv_std(i, 0) * (dxhat[j] - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                      }
                    }
                  }
                });
}

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  Matrix out = t.value(a);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return t.push(std::move(out), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value_at(self);
    const Matrix& g = tp.grad_at(self);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var log_softmax_rows(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  Matrix out = t.value(a);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (double& v : row) v -= lse;
  }
  return t.push(std::move(out), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value_at(self);
    const Matrix& g = tp.grad_at(self);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
  Tape& t = *a.tape;
  t.check_owned(a);
  for (std::size_t i : idx) {
    if (i >= t.value(a).rows()) throw InvariantError("gather_rows: index out of range");
  }
  Matrix out = spanmatch::gather_rows(t.value(a), idx);
  return t.push(std::move(out), t.requires_grad(a), [a = a.id, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = d.row(idx[i]);
      auto src = g.row(i);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return gather_rows(a, std::move(idx));
}

inline Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw InvariantError("vstack: no parts");
  Tape& t = *parts.front().tape;
  std::vector<Matrix> vals;
  std::vector<std::size_t> ids;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.tape != &t) throw InvariantError("mixing variables from different tapes");
    t.check_owned(p);
    vals.push_back(t.value(p));
    ids.push_back(p.id);
    rg = rg || t.requires_grad(p);
  }
  Matrix out = spanmatch::vstack(vals);
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    std::size_t r = 0;
    for (std::size_t id : ids) {
      const std::size_t rows = tp.value_at(id).rows();
      if (tp.needs_grad_at(id)) {
        Matrix& d = tp.grad_slot(id);
        for (std::size_t i = 0; i < rows; ++i) {
          auto src = g.row(r + i);
          auto dst = d.row(i);
          for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
        }
      }
      r += rows;
    }
  });
}

// Concatenates equally tall matrices side by side.
inline Var hstack(std::span<const Var> parts) {
  if (parts.empty()) throw InvariantError("hstack: no parts");
  Tape& t = *parts.front().tape;
  const std::size_t rows = t.value(parts.front()).rows();
  std::size_t cols = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (p.tape != &t) throw InvariantError("mixing variables from different tapes");
    t.check_owned(p);
    if (t.value(p).rows() != rows) throw InvariantError("hstack: row mismatch");
    cols += t.value(p).cols();
    rg = rg || t.requires_grad(p);
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Matrix& v = t.value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, c0 + j) = v(i, j);
    c0 += v.cols();
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    std::size_t c0 = 0;
    for (std::size_t id : ids) {
      const std::size_t cols = tp.value_at(id).cols();
      if (tp.needs_grad_at(id)) {
        Matrix& d = tp.grad_slot(id);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < cols; ++j) d(i, j) += g(i, c0 + j);
      }
      c0 += cols;
    }
  });
}

inline Var column(Var a, std::size_t c) {
  Tape& t = *a.tape;
  t.check_owned(a);
  const Matrix& v = t.value(a);
  if (c >= v.cols()) throw InvariantError("column: index out of range");
  Matrix out(v.rows(), 1);
  for (std::size_t i = 0; i < v.rows(); ++i) out(i, 0) = v(i, c);
  return t.push(std::move(out), t.requires_grad(a), [a = a.id, c](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.rows(); ++i) d(i, c) += g(i, 0);
  });
}

// n x 1 column of row-wise dot products.
inline Var row_dot(Var a, Var b) {
  Tape& t = detail::tape_of({a, b});
  require_same_shape(t.value(a), t.value(b), "row_dot");
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  Matrix out(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < av.cols(); ++j) s += av(i, j) * bv(i, j);
    out(i, 0) = s;
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& av = tp.value_at(a);
    const Matrix& bv = tp.value_at(b);
    if (tp.needs_grad_at(a)) {
      Matrix& d = tp.grad_slot(a);
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += g(i, 0) * bv(i, j);
    }
    if (tp.needs_grad_at(b)) {
      Matrix& d = tp.grad_slot(b);
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += g(i, 0) * av(i, j);
    }
  });
}

// Multiplies row i of a by s(i, 0).
inline Var scale_rows(Var a, Var s) {
  Tape& t = detail::tape_of({a, s});
  const Matrix& av = t.value(a);
  const Matrix& sv = t.value(s);
  if (sv.rows() != av.rows() || sv.cols() != 1) throw InvariantError("scale_rows: bad scale shape");
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= sv(i, 0);
  const bool rg = t.requires_grad(a) || t.requires_grad(s);
  return t.push(std::move(out), rg, [a = a.id, s = s.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& av = tp.value_at(a);
    const Matrix& sv = tp.value_at(s);
    if (tp.needs_grad_at(a)) {
      Matrix& d = tp.grad_slot(a);
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += g(i, j) * sv(i, 0);
    }
    if (tp.needs_grad_at(s)) {
      Matrix& d = tp.grad_slot(s);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) acc += g(i, j) * av(i, j);
        d(i, 0) += acc;
      }
    }
  });
}

// n x 1 column of euclidean row norms. The subgradient at a zero row is 0.
inline Var row_norm(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  const Matrix& av = t.value(a);
  Matrix out(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (double v : av.row(i)) s += v * v;
    out(i, 0) = std::sqrt(s);
  }
  return t.push(std::move(out), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& y = tp.value_at(self);
    const Matrix& av = tp.value_at(a);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < av.rows(); ++i) {
      if (y(i, 0) == 0.0) continue;
      const double f = g(i, 0) / y(i, 0);
      for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += f * av(i, j);
    }
  });
}

inline Var row_sqnorm(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  const Matrix& av = t.value(a);
  Matrix out(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (double v : av.row(i)) s += v * v;
    out(i, 0) = s;
  }
  return t.push(std::move(out), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& av = tp.value_at(a);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += 2.0 * g(i, 0) * av(i, j);
  });
}

// n x 1 column holding a(i, idx[i]).
inline Var pick(Var a, std::vector<std::size_t> idx) {
  Tape& t = *a.tape;
  t.check_owned(a);
  const Matrix& av = t.value(a);
  if (idx.size() != av.rows()) throw InvariantError("pick: one index per row required");
  Matrix out(av.rows(), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= av.cols()) throw InvariantError("pick: column index out of range");
    out(i, 0) = av(i, idx[i]);
  }
  return t.push(std::move(out), t.requires_grad(a), [a = a.id, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    Matrix& d = tp.grad_slot(a);
    for (std::size_t i = 0; i < idx.size(); ++i) d(i, idx[i]) += g(i, 0);
  });
}

// 1 x 1 sum of all entries.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  double s = 0.0;
  for (double v : t.value(a).values()) s += v;
  return t.push(Matrix(1, 1, s), t.requires_grad(a), [a = a.id](Tape& tp, std::size_t self) {
    const double g = tp.grad_at(self)(0, 0);
    for (double& v : tp.grad_slot(a).values()) v += g;
  });
}

inline Var mean(Var a) {
  const std::size_t n = value(a).size();
  if (n == 0) throw InvariantError("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// phi(q, K) = softmax(q K^T) K, row-wise for every row of q. Unscaled dot products.
inline Var attend(Var queries, Var keys) {
  if (value(keys).rows() == 0) throw InvariantError("empty-attention: keys matrix has no rows");
  if (value(queries).cols() != value(keys).cols()) {
    throw InvariantError("attend: query/key width mismatch");
  }
  return matmul(softmax_rows(matmul_bt(queries, keys)), keys);
}

}  // namespace spanmatch::ad
