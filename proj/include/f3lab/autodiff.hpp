// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "f3lab/tensor.hpp"

namespace f3lab::ad {

struct TapeError : Error {
  using Error::Error;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order (so the node list is topologically sorted)
/// and replays their backward rules once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      own(v, op);
      rg = rg || nodes_[v.id()].requires_grad;
    }
    return record_impl(op, std::move(value), rg, std::move(fn));
  }

  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      own(v, op);
      rg = rg || nodes_[v.id()].requires_grad;
    }
    return record_impl(op, std::move(value), rg, std::move(fn));
  }

  /// Runs the backward pass from a scalar loss. A tape supports exactly one pass.
  void backward(Var loss) {
    own(loss, "backward");
    if (backward_done_) throw TapeError("backward already ran on this tape; build a new tape");
    const Tensor& lv = nodes_[loss.id()].value;
    if (lv.size() != 1) throw TapeError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Tensor(lv.shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient of the last backward pass with respect to `v`; zeros if unreached.
  Tensor grad(Var v) const {
    own(v, "grad");
    const Node& n = nodes_[v.id()];
    if (!n.requires_grad) throw TapeError("grad requested for a node that does not require grad");
    if (!backward_done_) throw TapeError("grad requested before backward");
    if (n.grad.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

  // Accessors used by backward rules.
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Zero-initialized gradient buffer for node `id`, or nullptr if it needs no gradient.
  Tensor* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void own(const Var& v, const char* op) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw TapeError(std::string(op) + ": variable is detached from this tape");
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    BackwardFn backward;
  };

  static void check_finite(const char* op, const Tensor& t) {
    if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
  }

  Var record_impl(const char* op, Tensor value, bool rg, BackwardFn fn) {
    check_finite(op, value);
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, rg ? std::move(fn) : nullptr});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw TapeError("value() on an unbound variable");
  return tape_->value(id_);
}

inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(const char* op, const Var& a, const Var& b) {
  if (!a.tape() || a.tape() != b.tape()) throw TapeError(std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

inline void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

// Row-broadcast is the only broadcast form: b of shape (n) or (1, n) against a of shape (m, n).
inline bool row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return false;
  if (a.rank() == 2 && b.size() == a.cols() && b.rows() == 1) return true;
  throw ShapeError("incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// dydx(x, y) is the local derivative given input x and output y.
template <class F, class D>
Var unary(const char* op, const Var& a, F f, D dydx) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  return t.record(op, std::move(out), {a}, [ia, dydx](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& x = tp.value(ia);
    const Tensor& y = tp.value(self);
    const Tensor& gy = tp.out_grad(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += gy[i] * dydx(x[i], y[i]);
  });
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  detail::gemm_nn(av.raw().data(), bv.raw().data(), out.raw().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    if (Tensor* ga = tp.grad_sink(ia)) detail::gemm_nt(g.raw().data(), tp.value(ib).raw().data(), ga->raw().data(), m, n, k);
    if (Tensor* gb = tp.grad_sink(ib)) detail::gemm_tn(tp.value(ia).raw().data(), g.raw().data(), gb->raw().data(), m, k, n);
  });
}

/// a * b^T for a[m x k], b[n x k].
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul_nt", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2("matmul_nt", av);
  detail::require_rank2("matmul_nt", bv);
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt inner dimensions disagree: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out({m, n});
  detail::gemm_nt(av.raw().data(), bv.raw().data(), out.raw().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_nt", std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    if (Tensor* ga = tp.grad_sink(ia)) detail::gemm_nn(g.raw().data(), tp.value(ib).raw().data(), ga->raw().data(), m, n, k);
    if (Tensor* gb = tp.grad_sink(ib)) detail::gemm_tn(g.raw().data(), tp.value(ia).raw().data(), gb->raw().data(), m, n, k);
  });
}

namespace detail {

template <class F, class GA, class GB>
Var binary(const char* op, const Var& a, const Var& b, F f, GA dfa, GB dfb) {
  Tape& t = same_tape(op, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool bc = row_broadcast(av, bv);
  const std::size_t n = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[bc ? i % n : i]);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(op, std::move(out), {a, b}, [ia, ib, bc, n, dfa, dfb](Tape& tp, std::size_t self) {
    const Tensor& x = tp.value(ia);
    const Tensor& y = tp.value(ib);
    const Tensor& g = tp.out_grad(self);
    if (Tensor* ga = tp.grad_sink(ia)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * dfa(x[i], y[bc ? i % n : i]);
    }
    if (Tensor* gb = tp.grad_sink(ib)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*gb)[bc ? i % n : i] += g[i] * dfb(x[i], y[bc ? i % n : i]);
    }
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

inline Var scale(const Var& a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline Var add_scalar(const Var& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var tanh(const Var& a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var square(const Var& a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Gradient passes only strictly inside (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
  if (lo > hi) throw ShapeError("clamp requires lo <= hi");
  return detail::unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// sign(0) == 0; gradient is zero everywhere.
inline Var sign(const Var& a) {
  return detail::unary("sign", a, [](double x) { return sign_of(x); }, [](double, double) { return 0.0; });
}

inline Var abs(const Var& a) {
  return detail::unary("abs", a, [](double x) { return std::abs(x); }, [](double x, double) { return sign_of(x); });
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record("sum", Tensor::scalar(s), {a}, [ia](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const double g = tp.out_grad(self)[0];
    for (double& v : ga->data()) v += g;
  });
}

inline Var mean(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const double n = static_cast<double>(a.value().size());
  const std::size_t ia = a.id();
  return t.record("mean", Tensor::scalar(s / n), {a}, [ia, n](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const double g = tp.out_grad(self)[0] / n;
    for (double& v : ga->data()) v += g;
  });
}

/// Euclidean norm over all entries; zero subgradient at the origin.
inline Var l2_norm(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const std::size_t ia = a.id();
  return t.record("l2_norm", Tensor::scalar(std::sqrt(s)), {a}, [ia](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const double norm = tp.value(self)[0];
    if (norm == 0.0) return;
    const double g = tp.out_grad(self)[0] / norm;
    const Tensor& x = tp.value(ia);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g * x[i];
  });
}

/// Elementwise p * ln(p / q), with 0 * ln(0 / q) defined as 0.
inline Var kl_terms(const Var& p, const Var& q) {
  Tape& t = detail::same_tape("kl_terms", p, q);
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  if (pv.shape() != qv.shape()) throw ShapeError("kl_terms shape mismatch");
  Tensor out(pv.shape());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < 0.0) throw NumericError("kl_terms: p must be nonnegative");
    if (pv[i] == 0.0) continue;
    if (qv[i] <= 0.0) throw NumericError("kl_terms: q must be positive where p > 0");
    out[i] = pv[i] * std::log(pv[i] / qv[i]);
  }
  const std::size_t ip = p.id(), iq = q.id();
  return t.record("kl_terms", std::move(out), {p, q}, [ip, iq](Tape& tp, std::size_t self) {
    const Tensor& pv = tp.value(ip);
    const Tensor& qv = tp.value(iq);
    const Tensor& g = tp.out_grad(self);
    if (Tensor* gp = tp.grad_sink(ip)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) (*gp)[i] += g[i] * (std::log(pv[i] / qv[i]) + 1.0);
      }
    }
    if (Tensor* gq = tp.grad_sink(iq)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) (*gq)[i] -= g[i] * pv[i] / qv[i];
      }
    }
  });
}

/// Max-stabilized softmax along `axis`.
inline Var softmax(const Var& a, std::size_t axis) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (axis >= av.rank()) throw ShapeError("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  const std::size_t n = av.dim(axis);
  Tensor out(av.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = av[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  }
  const std::size_t ia = a.id();
  return t.record("softmax", std::move(out), {a}, [ia, outer, inner, n](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& y = tp.value(self);
    const Tensor& g = tp.out_grad(self);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          (*ga)[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// Divides each row of a rank-2 tensor by its sum. Rows must have a positive sum.
inline Var normalize_rows(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  detail::require_rank2("normalize_rows", av);
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(av.shape());
  std::vector<double> sums(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += av.at(i, j);
    if (!(sums[i] > 0.0)) throw NumericError("normalize_rows: row " + std::to_string(i) + " has non-positive sum");
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = av.at(i, j) / sums[i];
  }
  const std::size_t ia = a.id();
  return t.record("normalize_rows", std::move(out), {a}, [ia, r, c, sums](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& y = tp.value(self);
    const Tensor& g = tp.out_grad(self);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < c; ++j) ga->at(i, j) += (g.at(i, j) - dot) / sums[i];
    }
  });
}

/// -log softmax(logits)[label] for a single row of logits.
inline Var cross_entropy(const Var& logits, std::size_t label) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  if (lv.rows() != 1) throw ShapeError("cross_entropy expects a single row of logits");
  const std::size_t k = lv.size();
  if (label >= k) throw ShapeError("cross_entropy label " + std::to_string(label) + " out of range [0, " + std::to_string(k) + ")");
  double mx = lv[0];
  for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, lv[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += std::exp(lv[i] - mx);
  const double lse = mx + std::log(s);
  const std::size_t il = logits.id();
  return t.record("cross_entropy", Tensor::scalar(lse - lv[label]), {logits}, [il, label, lse](Tape& tp, std::size_t self) {
    Tensor* gl = tp.grad_sink(il);
    if (!gl) return;
    const Tensor& x = tp.value(il);
    const double g = tp.out_grad(self)[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*gl)[i] += g * (std::exp(x[i] - lse) - (i == label ? 1.0 : 0.0));
    }
  });
}

/// Rows [r0, r1) and columns [c0, c1) of a rank-2 tensor.
inline Var slice(const Var& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  detail::require_rank2("slice", av);
  if (r0 >= r1 || c0 >= c1 || r1 > av.rows() || c1 > av.cols()) throw ShapeError("slice bounds out of range");
  Tensor out({r1 - r0, c1 - c0});
  for (std::size_t i = r0; i < r1; ++i) {
    for (std::size_t j = c0; j < c1; ++j) out.at(i - r0, j - c0) = av.at(i, j);
  }
  const std::size_t ia = a.id();
  return t.record("slice", std::move(out), {a}, [ia, r0, r1, c0, c1](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& g = tp.out_grad(self);
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = c0; j < c1; ++j) ga->at(i, j) += g.at(i - r0, j - c0);
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& t = *parts.front().tape();
  const std::size_t c = parts.front().value().cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    t.own(p, "concat_rows");
    if (p.value().rank() > 2 || p.value().cols() != c) throw ShapeError("concat_rows column mismatch");
    r += p.value().rows();
  }
  Tensor out({r, c});
  std::size_t off = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    std::copy(p.value().raw().begin(), p.value().raw().end(), out.raw().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
    ids.push_back(p.id());
  }
  return t.record("concat_rows", std::move(out), parts, [ids](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t n = tp.value(id).size();
      if (Tensor* gp = tp.grad_sink(id)) {
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[off + i];
      }
      off += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Tape& t = *parts.front().tape();
  const std::size_t r = parts.front().value().rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    t.own(p, "concat_cols");
    detail::require_rank2("concat_cols", p.value());
    if (p.value().rows() != r) throw ShapeError("concat_cols row mismatch");
    c += p.value().cols();
  }
  Tensor out({r, c});
  std::vector<std::size_t> ids;
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < v.cols(); ++j) out.at(i, c0 + j) = v.at(i, j);
    }
    c0 += v.cols();
    ids.push_back(p.id());
  }
  return t.record("concat_cols", std::move(out), parts, [ids, r](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    std::size_t c0 = 0;
    for (std::size_t id : ids) {
      const std::size_t pc = tp.value(id).cols();
      if (Tensor* gp = tp.grad_sink(id)) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < pc; ++j) gp->at(i, j) += g.at(i, c0 + j);
        }
      }
      c0 += pc;
    }
  });
}

/// out[i] = a[index[i]] reshaped to `shape`; backward scatter-adds.
inline Var gather(const Var& a, std::vector<std::size_t> index, Shape shape) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (shape_size(shape) != index.size()) throw ShapeError("gather index count does not match output shape");
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.size()) throw ShapeError("gather index out of range");
    out[i] = av[index[i]];
  }
  const std::size_t ia = a.id();
  return t.record("gather", std::move(out), {a}, [ia, index = std::move(index)](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& g = tp.out_grad(self);
    for (std::size_t i = 0; i < index.size(); ++i) (*ga)[index[i]] += g[i];
  });
}

/// Rows of a rank-2 table selected by id (embedding lookup).
inline Var gather_rows(const Var& table, const std::vector<std::size_t>& ids) {
  const Tensor& tv = table.value();
  detail::require_rank2("gather_rows", tv);
  const std::size_t d = tv.cols();
  std::vector<std::size_t> index;
  index.reserve(ids.size() * d);
  for (std::size_t id : ids) {
    if (id >= tv.rows()) throw ShapeError("gather_rows id " + std::to_string(id) + " out of range");
    for (std::size_t j = 0; j < d; ++j) index.push_back(id * d + j);
  }
  return gather(table, std::move(index), {ids.size(), d});
}

inline Var reshape(const Var& a, Shape shape) {
  Tape& t = *a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return t.record("reshape", std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    Tensor* ga = tp.grad_sink(ia);
    if (!ga) return;
    const Tensor& g = tp.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

/// Maximum relative error between reverse-mode and central-difference gradients:
/// max_i |ad_i - fd_i| / max(1e-8, |fd_i|). Callers must avoid nondifferentiable points.
inline double grad_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& x, double h = 1e-5) {
  Tensor ad;
  {
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = fn(tape, xv);
    tape.backward(y);
    ad = tape.grad(xv);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return fn(tape, tape.constant(at)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(ad[i] - fd) / std::max(1e-8, std::abs(fd)));
  }
  return worst;
}

}  // namespace f3lab::ad
