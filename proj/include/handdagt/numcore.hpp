#pragma once

// Dense-array math with reverse-mode differentiation on a linear tape.
// Eager execution, no fusion; float for training, double for gradient
// checking. Broadcasting is restricted to leading-axis expansion (a
// trailing-suffix operand) plus the explicit expand() op.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "handdagt/common.hpp"

namespace hdagt {

// ------------------------------------------------------------- parameters

// Leaf array: persistent value plus gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = true;

  std::int64_t size() const { return numel(shape); }

  void init(std::string n, Shape s, bool rg = true) {
    name = std::move(n);
    require_valid_shape(s, name.c_str());
    shape = std::move(s);
    value.assign(static_cast<std::size_t>(numel(shape)), T(0));
    requires_grad = rg;
    grad.assign(requires_grad ? value.size() : 0, T(0));
  }

  void init_uniform(std::string n, Shape s, double bound, RandomStream& rng,
                    bool rg = true) {
    init(std::move(n), std::move(s), rg);
    for (auto& v : value) v = static_cast<T>(rng.uniform(-bound, bound));
  }

  void zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), T(0));
  }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

// ------------------------------------------------------------------ tape

template <typename T>
class Tape;

// Lightweight handle onto a tape node.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const std::vector<T>& value() const;
};

template <typename T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated during backward for grad-needing nodes
    bool needs_grad = false;
    Param<T>* leaf = nullptr;
    std::function<void(Tape&, int)> backprop;  // null for leaves/constants
  };

  Var<T> leaf(Param<T>& p) {
    Node n;
    n.shape = p.shape;
    n.value = p.value;
    n.needs_grad = p.requires_grad;
    n.leaf = &p;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(Shape shape, std::vector<T> value) {
    require_valid_shape(shape, "constant");
    if (numel(shape) != static_cast<std::int64_t>(value.size())) {
      throw DimensionError("constant: shape " + shape_str(shape) + " needs " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(value.size()));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> scalar(T v) { return constant({1}, {v}); }

  int emit(Shape shape, std::vector<T> value, bool needs_grad,
           std::function<void(Tape&, int)> backprop) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Shape& shape(int id) const { return nodes_[id].shape; }
  const std::vector<T>& value(int id) const { return nodes_[id].value; }
  const std::vector<T>& grad(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Gradient buffer of a node, or nullptr when the node does not need one.
  // Ops use this in their backprop closures to skip dead branches.
  T* grad_data(int id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    return n.grad.data();
  }

  // Reverse sweep from a scalar output. Visits nodes in exact reverse
  // execution order and accumulates leaf gradients into their Params.
  void backward(Var<T> out) {
    if (out.tape != this) throw ContractViolation("backward: foreign var");
    const Node& o = nodes_[out.id];
    if (numel(o.shape) != 1) {
      throw ContractViolation("backward: output must be scalar, got shape " +
                              shape_str(o.shape));
    }
    if (!std::isfinite(static_cast<double>(o.value[0]))) {
      throw NumericError("backward: non-finite output value");
    }
    for (int i = 0; i <= out.id; ++i) {
      Node& n = nodes_[i];
      if (n.needs_grad) n.grad.assign(n.value.size(), T(0));
    }
    if (!nodes_[out.id].needs_grad) return;
    nodes_[out.id].grad[0] = T(1);
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.backprop) n.backprop(*this, i);
    }
    for (int i = 0; i <= out.id; ++i) {
      Node& n = nodes_[i];
      if (n.leaf != nullptr && n.leaf->requires_grad) {
        T* dst = n.leaf->grad.data();
        const T* src = n.grad.data();
        for (std::size_t j = 0; j < n.grad.size(); ++j) dst[j] += src[j];
      }
    }
  }

  // Frees every recorded intermediate.
  void clear() {
    nodes_.clear();
    nodes_.shrink_to_fit();
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Shape& Var<T>::shape() const {
  return tape->shape(id);
}

template <typename T>
const std::vector<T>& Var<T>::value() const {
  return tape->value(id);
}

// ------------------------------------------------------------------ gemm
//
// Hand-rolled row-major kernels. Every output element accumulates in a
// fixed order that does not depend on its position, so identical input
// rows produce bitwise-identical output rows and repeated runs are exactly
// reproducible. (Library GEMMs route different rows through different
// micro-kernels and break that.)

namespace detail {

// C = [beta*C] + A (m x k) * B (k x n); axpy form, strict k-order.
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T beta, T* c, int ldc) {
  if (beta == T(0)) {
    for (int i = 0; i < m; ++i) {
      std::memset(c + static_cast<std::ptrdiff_t>(i) * ldc, 0, sizeof(T) * n);
    }
  }
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + static_cast<std::ptrdiff_t>(i) * lda;
    const T *a1 = a0 + lda, *a2 = a1 + lda, *a3 = a2 + lda;
    T* c0 = c + static_cast<std::ptrdiff_t>(i) * ldc;
    T *c1 = c0 + ldc, *c2 = c1 + ldc, *c3 = c2 + ldc;
    for (int p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* bp = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) {
        const T bj = bp[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + static_cast<std::ptrdiff_t>(i) * lda;
    T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const T v = ai[p];
      const T* bp = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}

// C = [beta*C] + A (m x k) * B^T with B stored (n x k); eight-lane dots
// whose reduction pattern depends only on k.
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::ptrdiff_t>(i) * lda;
    T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::ptrdiff_t>(j) * ldb;
      T lane[8] = {};
      int p = 0;
      for (; p + 8 <= k; p += 8) {
        for (int l = 0; l < 8; ++l) lane[l] += ai[p + l] * bj[p + l];
      }
      T tail = T(0);
      for (; p < k; ++p) tail += ai[p] * bj[p];
      const T s01 = lane[0] + lane[1], s23 = lane[2] + lane[3];
      const T s45 = lane[4] + lane[5], s67 = lane[6] + lane[7];
      const T dot = ((s01 + s23) + (s45 + s67)) + tail;
      ci[j] = (beta == T(0) ? T(0) : ci[j]) + dot;
    }
  }
}

// C (m x n) = [beta*C] + A^T * B with A stored (k x m), B (k x n).
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T beta, T* c, int ldc) {
  if (beta == T(0)) {
    for (int i = 0; i < m; ++i) {
      std::memset(c + static_cast<std::ptrdiff_t>(i) * ldc, 0, sizeof(T) * n);
    }
  }
  for (int p = 0; p < k; ++p) {
    const T* ap = a + static_cast<std::ptrdiff_t>(p) * lda;
    const T* bp = b + static_cast<std::ptrdiff_t>(p) * ldb;
    for (int i = 0; i < m; ++i) {
      const T v = ap[i];
      T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}

}  // namespace detail

template <typename T>
void gemm_raw(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
              const T* a, int lda, const T* b, int ldb, T beta, T* c,
              int ldc) {
  if (alpha != T(1)) throw ContractViolation("gemm: only alpha == 1");
  if (!trans_a && !trans_b) {
    detail::gemm_nn(m, n, k, a, lda, b, ldb, beta, c, ldc);
  } else if (!trans_a && trans_b) {
    detail::gemm_nt(m, n, k, a, lda, b, ldb, beta, c, ldc);
  } else if (trans_a && !trans_b) {
    detail::gemm_tn(m, n, k, a, lda, b, ldb, beta, c, ldc);
  } else {
    throw ContractViolation("gemm: double transpose unsupported");
  }
}

// -------------------------------------------------------------- helpers

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Reduce a gradient over leading broadcast axes: src has rep * n entries,
// dst has n.
template <typename T>
inline void fold_leading(const T* src, T* dst, std::int64_t rep,
                         std::int64_t n) {
  for (std::int64_t r = 0; r < rep; ++r) {
    const T* s = src + r * n;
    for (std::int64_t i = 0; i < n; ++i) dst[i] += s[i];
  }
}

template <typename T>
inline void check_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) {
    throw ContractViolation(std::string(op) + ": operands on different tapes");
  }
}

}  // namespace detail

// -------------------------------------------------------- elementwise ops

// Binary elementwise with optional leading-axis broadcast: shapes must be
// equal, or one operand's shape must be a trailing suffix of the other's
// (the suffix operand is repeated along the leading axes).
template <typename T, typename Fwd, typename Bwd>
Var<T> binary_op(const char* name, Var<T> a, Var<T> b, Fwd fwd, Bwd bwd) {
  detail::check_same_tape(a, b, name);
  Tape<T>& t = *a.tape;
  const Shape& sa = t.shape(a.id);
  const Shape& sb = t.shape(b.id);
  bool a_big = true;
  if (sa == sb) {
    a_big = true;
  } else if (detail::is_suffix(sb, sa)) {
    a_big = true;
  } else if (detail::is_suffix(sa, sb)) {
    a_big = false;
  } else {
    throw DimensionError(std::string(name) + ": shapes " + shape_str(sa) +
                         " and " + shape_str(sb) + " are not broadcastable");
  }
  const Shape& out_shape = a_big ? sa : sb;
  const std::int64_t n_small = a_big ? numel(sb) : numel(sa);
  const std::int64_t n_out = numel(out_shape);
  const std::int64_t rep = n_out / n_small;

  const std::vector<T>& va = t.value(a.id);
  const std::vector<T>& vb = t.value(b.id);
  std::vector<T> out(static_cast<std::size_t>(n_out));
  for (std::int64_t r = 0; r < rep; ++r) {
    for (std::int64_t i = 0; i < n_small; ++i) {
      const std::int64_t big_i = r * n_small + i;
      const T x = a_big ? va[big_i] : va[i];
      const T y = a_big ? vb[i] : vb[big_i];
      out[big_i] = fwd(x, y);
    }
  }
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  int id = t.emit(
      out_shape, std::move(out), ng,
      [aid, bid, a_big, rep, n_small, bwd](Tape<T>& tp, int self) {
        const T* dy = tp.grad(self).data();
        const std::vector<T>& va2 = tp.value(aid);
        const std::vector<T>& vb2 = tp.value(bid);
        T* da = tp.grad_data(aid);
        T* db = tp.grad_data(bid);
        for (std::int64_t r = 0; r < rep; ++r) {
          for (std::int64_t i = 0; i < n_small; ++i) {
            const std::int64_t big_i = r * n_small + i;
            const std::int64_t ia = a_big ? big_i : i;
            const std::int64_t ib = a_big ? i : big_i;
            T gx, gy;
            bwd(va2[ia], vb2[ib], dy[big_i], gx, gy);
            if (da) da[ia] += gx;
            if (db) db[ib] += gy;
          }
        }
      });
  return {&t, id};
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T dy, T& gx, T& gy) {
        gx = dy;
        gy = dy;
      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T dy, T& gx, T& gy) {
        gx = dy;
        gy = -dy;
      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T dy, T& gx, T& gy) {
        gx = dy * y;
        gy = dy * x;
      });
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary_op(Var<T> a, Fwd fwd, Bwd bwd) {
  Tape<T>& t = *a.tape;
  const std::vector<T>& va = t.value(a.id);
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i]);
  const int aid = a.id;
  int id = t.emit(t.shape(a.id), std::move(out), t.needs_grad(a.id),
                  [aid, bwd](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    const T* x = tp.value(aid).data();
                    const T* y = tp.value(self).data();
                    const std::size_t n = tp.value(self).size();
                    for (std::size_t i = 0; i < n; ++i) {
                      da[i] += bwd(x[i], y[i], dy[i]);
                    }
                  });
  return {&t, id};
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary_op<T>(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T dy) { return x > T(0) ? dy : T(0); });
}

// Output clamped into the open interval (0,1) so downstream gate contracts
// hold even for saturating inputs.
template <typename T>
Var<T> sigmoid(Var<T> a) {
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return unary_op<T>(
      a,
      [lo, hi](T x) {
        T y;
        if (x >= T(0)) {
          y = T(1) / (T(1) + std::exp(-x));
        } else {
          const T e = std::exp(x);
          y = e / (T(1) + e);
        }
        return std::min(hi, std::max(lo, y));
      },
      [](T, T y, T dy) { return dy * y * (T(1) - y); });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary_op<T>(
      a, [s](T x) { return s * x; }, [s](T, T, T dy) { return s * dy; });
}

// Piecewise loss: quadratic 50*x^2 inside |x| < 0.01, |x| - 0.005 outside;
// continuous at the knee with derivative magnitude <= 1 everywhere.
template <typename T>
Var<T> smooth_l1(Var<T> a) {
  constexpr T knee = T(0.01);
  constexpr T quad = T(50);
  return unary_op<T>(
      a,
      [](T x) {
        const T ax = std::abs(x);
        return ax < knee ? quad * x * x : ax - T(0.005);
      },
      [](T x, T, T dy) {
        const T ax = std::abs(x);
        const T d = ax < knee ? T(2) * quad * x : (x >= T(0) ? T(1) : T(-1));
        return dy * d;
      });
}

// ---------------------------------------------------------------- matmul

// a: [B.., m, k] x b: [B.., k, n] -> [B.., m, n]. Batch extents must match
// exactly, or one operand may be rank-2 (shared across the other's batch).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "matmul");
  Tape<T>& t = *a.tape;
  const Shape& sa = t.shape(a.id);
  const Shape& sb = t.shape(b.id);
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands must be rank >= 2, got " +
                         shape_str(sa) + " and " + shape_str(sb));
  }
  const int m = sa[sa.size() - 2];
  const int k = sa[sa.size() - 1];
  const int k2 = sb[sb.size() - 2];
  const int n = sb[sb.size() - 1];
  if (k != k2) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(sa) +
                         " x " + shape_str(sb));
  }
  Shape batch_a(sa.begin(), sa.end() - 2);
  Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_b.empty()) {
    batch = batch_a;
  } else if (batch_a.empty()) {
    batch = batch_b;
  } else {
    throw DimensionError("matmul: batch extents differ, " + shape_str(sa) +
                         " x " + shape_str(sb));
  }
  const std::int64_t nb = numel(batch);
  const bool a_batched = !batch_a.empty();
  const bool b_batched = !batch_b.empty();

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));

  const T* pa = t.value(a.id).data();
  const T* pb = t.value(b.id).data();
  const std::int64_t stride_a = a_batched ? std::int64_t(m) * k : 0;
  const std::int64_t stride_b = b_batched ? std::int64_t(k) * n : 0;
  for (std::int64_t i = 0; i < nb; ++i) {
    gemm_raw(false, false, m, n, k, T(1), pa + i * stride_a, k,
             pb + i * stride_b, n, T(0), out.data() + i * std::int64_t(m) * n,
             n);
  }

  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  const int aid = a.id, bid = b.id;
  int id = t.emit(
      std::move(out_shape), std::move(out), ng,
      [aid, bid, m, n, k, nb, stride_a, stride_b](Tape<T>& tp, int self) {
        const T* dy = tp.grad(self).data();
        const T* va = tp.value(aid).data();
        const T* vb = tp.value(bid).data();
        T* da = tp.grad_data(aid);
        T* db = tp.grad_data(bid);
        for (std::int64_t i = 0; i < nb; ++i) {
          const T* dyi = dy + i * std::int64_t(m) * n;
          if (da) {
            // dA = dC * B^T
            gemm_raw(false, true, m, k, n, T(1), dyi, n, vb + i * stride_b, n,
                     T(1), da + i * stride_a, k);
          }
          if (db) {
            // dB = A^T * dC
            gemm_raw(true, false, k, n, m, T(1), va + i * stride_a, k, dyi, n,
                     T(1), db + i * stride_b, n);
          }
        }
      });
  return {&t, id};
}

// ------------------------------------------------------------- reductions

template <typename T>
Var<T> reduce_max(Var<T> a, int axis) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (axis < 0 || axis >= static_cast<int>(s.size()) || s[axis] < 1) {
    throw DomainError("reduce_max: invalid axis " + std::to_string(axis) +
                      " for shape " + shape_str(s));
  }
  const std::int64_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::int64_t extent = s[axis];
  const std::int64_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};

  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(static_cast<std::size_t>(outer * inner));
  std::vector<std::int64_t> arg(out.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      std::int64_t best = o * extent * inner + i;
      T bv = v[best];
      for (std::int64_t e = 1; e < extent; ++e) {
        const std::int64_t idx = (o * extent + e) * inner + i;
        if (v[idx] > bv) {  // strict: ties keep the lowest index
          bv = v[idx];
          best = idx;
        }
      }
      out[o * inner + i] = bv;
      arg[o * inner + i] = best;
    }
  }
  const int aid = a.id;
  int id = t.emit(std::move(out_shape), std::move(out), t.needs_grad(a.id),
                  [aid, arg = std::move(arg)](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    for (std::size_t i = 0; i < arg.size(); ++i) {
                      da[arg[i]] += dy[i];
                    }
                  });
  return {&t, id};
}

template <typename T>
Var<T> reduce_mean(Var<T> a, int axis) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DomainError("reduce_mean: invalid axis " + std::to_string(axis) +
                      " for shape " + shape_str(s));
  }
  const std::int64_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::int64_t extent = s[axis];
  const std::int64_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};

  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t e = 0; e < extent; ++e) {
      for (std::int64_t i = 0; i < inner; ++i) {
        out[o * inner + i] += v[(o * extent + e) * inner + i];
      }
    }
  }
  const T inv = T(1) / static_cast<T>(extent);
  for (auto& x : out) x *= inv;
  const int aid = a.id;
  int id = t.emit(std::move(out_shape), std::move(out), t.needs_grad(a.id),
                  [aid, outer, extent, inner, inv](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                      for (std::int64_t e = 0; e < extent; ++e) {
                        for (std::int64_t i = 0; i < inner; ++i) {
                          da[(o * extent + e) * inner + i] +=
                              dy[o * inner + i] * inv;
                        }
                      }
                    }
                  });
  return {&t, id};
}

template <typename T>
Var<T> reduce_sum_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::vector<T>& v = t.value(a.id);
  T acc = T(0);
  for (T x : v) acc += x;
  const int aid = a.id;
  const std::int64_t n = static_cast<std::int64_t>(v.size());
  int id = t.emit({1}, {acc}, t.needs_grad(a.id),
                  [aid, n](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T dy = tp.grad(self)[0];
                    for (std::int64_t i = 0; i < n; ++i) da[i] += dy;
                  });
  return {&t, id};
}

template <typename T>
Var<T> softmax(Var<T> a, int axis) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DomainError("softmax: invalid axis " + std::to_string(axis) +
                      " for shape " + shape_str(s));
  }
  const std::int64_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::int64_t extent = s[axis];
  const std::int64_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(v.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      T mx = v[o * extent * inner + i];
      for (std::int64_t e = 1; e < extent; ++e) {
        mx = std::max(mx, v[(o * extent + e) * inner + i]);
      }
      T denom = T(0);
      for (std::int64_t e = 0; e < extent; ++e) {
        const std::int64_t idx = (o * extent + e) * inner + i;
        out[idx] = std::exp(v[idx] - mx);
        denom += out[idx];
      }
      for (std::int64_t e = 0; e < extent; ++e) {
        out[(o * extent + e) * inner + i] /= denom;
      }
    }
  }
  const int aid = a.id;
  int id = t.emit(s, std::move(out), t.needs_grad(a.id),
                  [aid, outer, extent, inner](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    const T* y = tp.value(self).data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                      for (std::int64_t i = 0; i < inner; ++i) {
                        T dot = T(0);
                        for (std::int64_t e = 0; e < extent; ++e) {
                          const std::int64_t idx = (o * extent + e) * inner + i;
                          dot += dy[idx] * y[idx];
                        }
                        for (std::int64_t e = 0; e < extent; ++e) {
                          const std::int64_t idx = (o * extent + e) * inner + i;
                          da[idx] += y[idx] * (dy[idx] - dot);
                        }
                      }
                    }
                  });
  return {&t, id};
}

// --------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>& t = *a.tape;
  require_valid_shape(shape, "reshape");
  if (numel(shape) != numel(t.shape(a.id))) {
    throw DimensionError("reshape: " + shape_str(t.shape(a.id)) + " -> " +
                         shape_str(shape) + " changes element count");
  }
  const int aid = a.id;
  std::vector<T> v = t.value(a.id);
  int id = t.emit(std::move(shape), std::move(v), t.needs_grad(a.id),
                  [aid](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const std::vector<T>& dy = tp.grad(self);
                    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                  });
  return {&t, id};
}

// Insert a new axis of extent n at position `axis` and repeat along it.
template <typename T>
Var<T> expand(Var<T> a, int axis, int n) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (axis < 0 || axis > static_cast<int>(s.size()) || n < 1) {
    throw DomainError("expand: invalid axis " + std::to_string(axis) +
                      " or extent " + std::to_string(n));
  }
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + axis, n);
  const std::int64_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::int64_t inner = numel(Shape(s.begin() + axis, s.end()));
  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(static_cast<std::size_t>(outer * n * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (int r = 0; r < n; ++r) {
      std::memcpy(out.data() + (o * n + r) * inner, v.data() + o * inner,
                  sizeof(T) * static_cast<std::size_t>(inner));
    }
  }
  const int aid = a.id;
  int id = t.emit(std::move(out_shape), std::move(out), t.needs_grad(a.id),
                  [aid, outer, n, inner](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                      for (int r = 0; r < n; ++r) {
                        const T* src = dy + (o * n + r) * inner;
                        T* dst = da + o * inner;
                        for (std::int64_t i = 0; i < inner; ++i) {
                          dst[i] += src[i];
                        }
                      }
                    }
                  });
  return {&t, id};
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw DomainError("concat: no parts");
  Tape<T>& t = *parts[0].tape;
  const Shape& s0 = t.shape(parts[0].id);
  if (axis < 0 || axis >= static_cast<int>(s0.size())) {
    throw DomainError("concat: invalid axis " + std::to_string(axis) +
                      " for shape " + shape_str(s0));
  }
  int total = 0;
  bool ng = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p, "concat");
    const Shape& sp = t.shape(p.id);
    if (sp.size() != s0.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " +
                           shape_str(sp));
    }
    for (std::size_t d = 0; d < s0.size(); ++d) {
      if (static_cast<int>(d) != axis && sp[d] != s0[d]) {
        throw DimensionError("concat: off-axis extent mismatch " +
                             shape_str(s0) + " vs " + shape_str(sp));
      }
    }
    total += sp[axis];
    ng = ng || t.needs_grad(p.id);
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const std::int64_t outer = numel(Shape(s0.begin(), s0.begin() + axis));
  const std::int64_t inner = numel(Shape(s0.begin() + axis + 1, s0.end()));

  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<int> ids;
  std::vector<std::int64_t> widths;  // axis extent * inner, per part
  ids.reserve(parts.size());
  widths.reserve(parts.size());
  const std::int64_t out_row = std::int64_t(total) * inner;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t w = std::int64_t(t.shape(p.id)[axis]) * inner;
    const T* src = t.value(p.id).data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * out_row + off, src + o * w,
                  sizeof(T) * static_cast<std::size_t>(w));
    }
    ids.push_back(p.id);
    widths.push_back(w);
    off += w;
  }
  int id = t.emit(std::move(out_shape), std::move(out), ng,
                  [ids, widths, outer, out_row](Tape<T>& tp, int self) {
                    const T* dy = tp.grad(self).data();
                    std::int64_t off2 = 0;
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      T* dp = tp.grad_data(ids[p]);
                      if (dp) {
                        for (std::int64_t o = 0; o < outer; ++o) {
                          const T* src = dy + o * out_row + off2;
                          T* dst = dp + o * widths[p];
                          for (std::int64_t i = 0; i < widths[p]; ++i) {
                            dst[i] += src[i];
                          }
                        }
                      }
                      off2 += widths[p];
                    }
                  });
  return {&t, id};
}

template <typename T>
Var<T> slice(Var<T> a, int axis, int start, int len) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || len < 1 ||
      start + len > s[axis]) {
    throw DomainError("slice: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") invalid for axis " +
                      std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = len;
  const std::int64_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::int64_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  const std::int64_t in_row = std::int64_t(s[axis]) * inner;
  const std::int64_t out_row = std::int64_t(len) * inner;
  const std::int64_t skip = std::int64_t(start) * inner;
  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(static_cast<std::size_t>(outer * out_row));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * out_row, v.data() + o * in_row + skip,
                sizeof(T) * static_cast<std::size_t>(out_row));
  }
  const int aid = a.id;
  int id = t.emit(std::move(out_shape), std::move(out), t.needs_grad(a.id),
                  [aid, outer, in_row, out_row, skip](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                      const T* src = dy + o * out_row;
                      T* dst = da + o * in_row + skip;
                      for (std::int64_t i = 0; i < out_row; ++i) {
                        dst[i] += src[i];
                      }
                    }
                  });
  return {&t, id};
}

// Gather along axis 0; backward scatter-adds. Index selection itself is
// non-differentiable.
template <typename T>
Var<T> index_rows(Var<T> a, std::vector<int> rows) {
  Tape<T>& t = *a.tape;
  const Shape& s = t.shape(a.id);
  if (s.empty()) throw DomainError("index_rows: scalar input");
  const int nrows = s[0];
  const std::int64_t inner = numel(Shape(s.begin() + 1, s.end()));
  for (int r : rows) {
    if (r < 0 || r >= nrows) {
      throw DomainError("index_rows: index " + std::to_string(r) +
                        " out of range [0," + std::to_string(nrows) + ")");
    }
  }
  Shape out_shape = s;
  out_shape[0] = static_cast<int>(rows.size());
  const std::vector<T>& v = t.value(a.id);
  std::vector<T> out(rows.size() * static_cast<std::size_t>(inner));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * inner,
                v.data() + std::int64_t(rows[i]) * inner,
                sizeof(T) * static_cast<std::size_t>(inner));
  }
  const int aid = a.id;
  int id = t.emit(std::move(out_shape), std::move(out), t.needs_grad(a.id),
                  [aid, rows = std::move(rows), inner](Tape<T>& tp, int self) {
                    T* da = tp.grad_data(aid);
                    if (!da) return;
                    const T* dy = tp.grad(self).data();
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      const T* src = dy + static_cast<std::int64_t>(i) * inner;
                      T* dst = da + std::int64_t(rows[i]) * inner;
                      for (std::int64_t j = 0; j < inner; ++j) {
                        dst[j] += src[j];
                      }
                    }
                  });
  return {&t, id};
}

// ------------------------------------------------------------- gradcheck

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool pass = false;
  std::string worst;  // "param[i]" of the worst element
};

// Compares reverse-mode gradients of a scalar-valued program against central
// finite differences. The FD path re-evaluates the program forward only and
// never touches the tape gradients, so it is an independent oracle.
template <typename T>
GradCheckResult gradcheck(const std::function<Var<T>(Tape<T>&)>& f,
                          std::span<Param<T>* const> inputs, T eps,
                          double tol) {
  auto eval = [&]() -> double {
    Tape<T> t;
    Var<T> out = f(t);
    if (numel(out.shape()) != 1) {
      throw ContractViolation("gradcheck: program output must be scalar");
    }
    const double v = static_cast<double>(out.value()[0]);
    if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite output");
    return v;
  };

  for (Param<T>* p : inputs) p->zero_grad();
  {
    Tape<T> t;
    Var<T> out = f(t);
    t.backward(out);
  }
  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (Param<T>* p : inputs) analytic.push_back(p->grad);

  GradCheckResult res;
  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    Param<T>* p = inputs[pi];
    if (!p->requires_grad) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T saved = p->value[i];
      p->value[i] = saved + eps;
      const double fp = eval();
      p->value[i] = saved - eps;
      const double fm = eval();
      p->value[i] = saved;
      const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double an = static_cast<double>(analytic[pi][i]);
      const double abs_err = std::abs(an - fd);
      const double rel =
          abs_err / std::max({1.0, std::abs(an), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = p->name + "[" + std::to_string(i) + "]";
      }
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
    }
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

}  // namespace hdagt
