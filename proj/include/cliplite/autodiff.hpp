#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tape is the computation record of one forward pass. Every op appends an
// entry holding its value and a backward rule; entries are appended in
// execution order, so the record is topological by construction. backward()
// walks it once in reverse, pushes gradients into the parameter tensors bound
// with Tape::param(), then clears the record. A tape is single-use.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cliplite/tensor.hpp"

namespace cliplite {

enum class OpKind {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  relu,
  softplus,
  exp,
  log,
  negate,
  linear,
  matmul,
  matmul_nt,
  conv2d,
  channel_bias,
  sum,
  mean,
  global_avg_pool,
  log_sum_exp,
  rowdot,
  gather_rows,
  gather_flat,
  diagonal,
  embed_mean,
  reshape,
  normalize_rows,
  custom,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::negate: return "negate";
    case OpKind::linear: return "linear";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::conv2d: return "conv2d";
    case OpKind::channel_bias: return "channel_bias";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::log_sum_exp: return "log_sum_exp";
    case OpKind::rowdot: return "rowdot";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::gather_flat: return "gather_flat";
    case OpKind::diagonal: return "diagonal";
    case OpKind::embed_mean: return "embed_mean";
    case OpKind::reshape: return "reshape";
    case OpKind::normalize_rows: return "normalize_rows";
    case OpKind::custom: return "custom";
  }
  return "?";
}

class Tape;

/// Handle to one node of a Tape. Cheap to copy; invalid once the tape is consumed.
class Var {
 public:
  Var() = default;

  Tape& tape() const {
    if (!tape_) throw std::logic_error("Var: not bound to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const;
  const std::vector<double>& value() const;
  std::size_t size() const { return value().size(); }
  double item() const;
  Tensor to_tensor() const { return Tensor(shape(), value()); }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) noexcept : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// train: params accumulate gradients into their tensors.
  /// frozen: params are differentiable nodes but their gradients are dropped
  ///         (used to read gradients of intermediate activations).
  /// inference: params are plain constants; nothing is differentiable.
  enum class Mode { train, frozen, inference };

  struct Entry;
  using BackwardFn = std::function<void(Tape&, const Entry&)>;

  struct Entry {
    OpKind kind = OpKind::leaf;
    std::string label;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Tensor* sink = nullptr;
    BackwardFn backward;
  };

  explicit Tape(Mode mode = Mode::train) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Bind a trainable tensor. Its value is copied into the record.
  Var param(Tensor& t, std::string label = "param") {
    if (!t.all_finite()) throw NumericError("param '" + label + "' holds non-finite values");
    Entry e;
    e.kind = OpKind::leaf;
    e.label = std::move(label);
    e.shape = t.shape;
    e.value = t.data;
    e.requires_grad = mode_ != Mode::inference;
    e.sink = mode_ == Mode::train ? &t : nullptr;
    return push(std::move(e));
  }

  /// Read-only binding; only valid on frozen and inference tapes.
  Var param(const Tensor& t, std::string label = "param") {
    if (mode_ == Mode::train) {
      throw std::logic_error("param '" + label + "': train tape needs a mutable tensor");
    }
    if (!t.all_finite()) throw NumericError("param '" + label + "' holds non-finite values");
    Entry e;
    e.kind = OpKind::leaf;
    e.label = std::move(label);
    e.shape = t.shape;
    e.value = t.data;
    e.requires_grad = mode_ == Mode::frozen;
    return push(std::move(e));
  }

  Var constant(Tensor t, std::string label = "constant") {
    Entry e;
    e.kind = OpKind::constant;
    e.label = std::move(label);
    e.shape = std::move(t.shape);
    e.value = std::move(t.data);
    check_finite(e);
    return push(std::move(e));
  }

  Var constant(Shape shape, std::vector<double> values, std::string label = "constant") {
    return constant(Tensor(std::move(shape), std::move(values)), std::move(label));
  }

  Var scalar(double v) { return constant(Tensor::scalar(v), "scalar"); }

  /// Append an op. `backward` receives the entry whose `grad` holds dLoss/dOutput
  /// and must add into tape.grad(input) for each input that requires_grad().
  Var record(OpKind kind, std::string label, std::vector<std::size_t> inputs, Shape shape,
             std::vector<double> value, BackwardFn backward) {
    ensure_live();
    if (value.size() != numel(shape)) {
      throw ShapeError(label + ": produced " + std::to_string(value.size()) +
                       " values for shape " + shape_str(shape));
    }
    Entry e;
    e.kind = kind;
    e.label = std::move(label);
    e.shape = std::move(shape);
    e.value = std::move(value);
    for (std::size_t in : inputs) {
      if (in >= entries_.size()) throw std::logic_error(e.label + ": input from the future");
      e.requires_grad = e.requires_grad || entries_[in].requires_grad;
    }
    e.inputs = std::move(inputs);
    e.backward = std::move(backward);
    check_finite(e);
    return push(std::move(e));
  }

  const Entry& entry(std::size_t id) const {
    ensure_live();
    if (id >= entries_.size()) throw std::logic_error("tape: unknown node id");
    return entries_[id];
  }

  bool requires_grad(std::size_t id) const { return entry(id).requires_grad; }

  /// Gradient buffer of a node, zero-filled on first access.
  std::vector<double>& grad(std::size_t id) {
    Entry& e = entries_.at(id);
    if (e.grad.empty()) e.grad.assign(e.value.size(), 0.0);
    return e.grad;
  }

  /// Reverse pass from a scalar loss. Gradients of the `capture` nodes are
  /// returned (zeros when no gradient reached them). The record is cleared.
  std::vector<Tensor> backward(const Var& loss, std::span<const Var> capture = {}) {
    if (consumed_) throw std::logic_error("backward: computation record already consumed");
    if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    const Entry& root = entry(loss.id());
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.shape));
    }
    grad(loss.id())[0] = 1.0;
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Entry& e = entries_[k];
      if (e.grad.empty() || !e.requires_grad) continue;
      if (e.backward) e.backward(*this, e);
      if (e.sink) {
        if (e.sink->grad.size() != e.grad.size()) e.sink->grad.assign(e.grad.size(), 0.0);
        for (std::size_t i = 0; i < e.grad.size(); ++i) e.sink->grad[i] += e.grad[i];
      }
    }
    std::vector<Tensor> captured;
    captured.reserve(capture.size());
    for (const Var& v : capture) {
      const Entry& e = entry(v.id());
      Tensor t(e.shape);
      if (!e.grad.empty()) t.data = e.grad;
      captured.push_back(std::move(t));
    }
    entries_.clear();
    entries_.shrink_to_fit();
    consumed_ = true;
    return captured;
  }

 private:
  Var push(Entry e) {
    ensure_live();
    entries_.push_back(std::move(e));
    return Var(this, entries_.size() - 1);
  }

  void ensure_live() const {
    if (consumed_) throw std::logic_error("tape: computation record already consumed");
  }

  static void check_finite(const Entry& e) {
    for (double v : e.value) {
      if (!std::isfinite(v)) throw NumericError(e.label + ": non-finite value produced");
    }
  }

  Mode mode_;
  bool consumed_ = false;
  std::vector<Entry> entries_;
};

inline const Shape& Var::shape() const { return tape().entry(id_).shape; }
inline const std::vector<double>& Var::value() const { return tape().entry(id_).value; }
inline double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(shape()));
  return v[0];
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands live on different tapes");
  return a.tape();
}

inline void require_rank(const Var& v, std::size_t rank, std::string_view op) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

// C[n x m] += A[n x k] * B[k x m]
inline void gemm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C,
                    std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* c = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      const double* b = B + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
    }
  }
}

// C[k x m] += A[n x k]^T * B[n x m]
inline void gemm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C,
                    std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* b = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      double* c = C + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
    }
  }
}

// C[n x m] += A[n x k] * B[m x k]^T
inline void gemm_nt(const double* A, const double* B, double* C, std::size_t n, std::size_t k,
                    std::size_t m) {
  std::vector<double> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = B[j * k + p];
  gemm_nn(A, bt.data(), C, n, k, m);
}

inline double softplus_value(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ReductionMap {
  Shape out_shape;
  std::vector<std::size_t> index;  // input flat index -> output flat index
  std::size_t group = 1;           // inputs per output cell
};

inline ReductionMap reduction_map(const Shape& shape, std::vector<std::size_t> axes,
                                  std::string_view op) {
  if (numel(shape) == 0) throw ShapeError(std::string(op) + ": empty input");
  if (axes.empty()) {
    axes.resize(shape.size());
    for (std::size_t i = 0; i < shape.size(); ++i) axes[i] = i;
  }
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t a : axes) {
    if (a >= shape.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(a) + " invalid for " +
                       shape_str(shape));
    }
    if (reduced[a]) throw ShapeError(std::string(op) + ": duplicate axis");
    reduced[a] = true;
  }
  ReductionMap r;
  std::vector<std::size_t> out_stride(shape.size(), 0);
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      r.group *= shape[d];
    } else {
      r.out_shape.push_back(shape[d]);
    }
  }
  std::size_t stride = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!reduced[d]) {
      out_stride[d] = stride;
      stride *= shape[d];
    }
  }
  const std::size_t n = numel(shape);
  r.index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
    r.index[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Broadcasting: exact shape match, or either side a scalar.

enum class ElementwiseOp { add, sub, mul, scale, relu, softplus, exp, log, negate };

inline Var binary(OpKind kind, const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Shape shape;
  int bcast = 0;  // 1: a is broadcast scalar, 2: b is broadcast scalar
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (av.size() == 1 && bv.size() == 1) {
    shape = a.shape().size() >= b.shape().size() ? a.shape() : b.shape();
  } else if (av.size() == 1) {
    bcast = 1;
    shape = b.shape();
  } else if (bv.size() == 1) {
    bcast = 2;
    shape = a.shape();
  } else {
    throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[bcast == 1 ? 0 : i];
    const double y = bv[bcast == 2 ? 0 : i];
    switch (kind) {
      case OpKind::add: out[i] = x + y; break;
      case OpKind::sub: out[i] = x - y; break;
      case OpKind::mul: out[i] = x * y; break;
      default: throw std::logic_error("binary: unsupported op");
    }
  }
  return tape.record(
      kind, std::string(op_name(kind)), {a.id(), b.id()}, shape, std::move(out),
      [kind, bcast](Tape& t, const Tape::Entry& self) {
        const std::size_t ia = self.inputs[0], ib = self.inputs[1];
        const auto& g = self.grad;
        const std::size_t n = g.size();
        if (t.requires_grad(ia)) {
          const auto& bv = t.entry(ib).value;
          auto& ga = t.grad(ia);
          for (std::size_t i = 0; i < n; ++i) {
            const double d = kind == OpKind::mul ? g[i] * bv[bcast == 2 ? 0 : i] : g[i];
            ga[bcast == 1 ? 0 : i] += d;
          }
        }
        if (t.requires_grad(ib)) {
          const auto& av = t.entry(ia).value;
          auto& gb = t.grad(ib);
          for (std::size_t i = 0; i < n; ++i) {
            double d = g[i];
            if (kind == OpKind::mul) d *= av[bcast == 1 ? 0 : i];
            if (kind == OpKind::sub) d = -d;
            gb[bcast == 2 ? 0 : i] += d;
          }
        }
      });
}

inline Var add(const Var& a, const Var& b) { return binary(OpKind::add, a, b); }
inline Var sub(const Var& a, const Var& b) { return binary(OpKind::sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return binary(OpKind::mul, a, b); }

namespace detail {

// Unary op whose derivative is a function of (input, output).
template <class Forward, class Derivative>
Var unary(OpKind kind, const Var& a, Forward f, Derivative df) {
  Tape& tape = a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return tape.record(kind, std::string(op_name(kind)), {a.id()}, a.shape(), std::move(out),
                     [df](Tape& t, const Tape::Entry& self) {
                       const std::size_t ia = self.inputs[0];
                       if (!t.requires_grad(ia)) return;
                       const auto& x = t.entry(ia).value;
                       auto& ga = t.grad(ia);
                       for (std::size_t i = 0; i < x.size(); ++i)
                         ga[i] += self.grad[i] * df(x[i], self.value[i]);
                     });
}

}  // namespace detail

inline Var scale(const Var& a, double c) {
  return detail::unary(
      OpKind::scale, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var negate(const Var& a) {
  return detail::unary(
      OpKind::negate, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var relu(const Var& a) {
  return detail::unary(
      OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// log(1 + e^x), evaluated as max(x,0) + log1p(e^-|x|) so it never overflows.
inline Var softplus(const Var& a) {
  return detail::unary(OpKind::softplus, a, detail::softplus_value,
                       [](double x, double) { return detail::sigmoid_value(x); });
}

inline Var exp(const Var& a) {
  return detail::unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(
      OpKind::log, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return negate(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

/// Dispatcher over the elementwise family. `b` is required for add/sub/mul;
/// `c` is the constant factor for scale.
inline Var elementwise(ElementwiseOp op, const Var& a, const Var* b = nullptr, double c = 1.0) {
  auto need_b = [&]() -> const Var& {
    if (!b) throw std::invalid_argument("elementwise: binary op needs a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::add: return add(a, need_b());
    case ElementwiseOp::sub: return sub(a, need_b());
    case ElementwiseOp::mul: return mul(a, need_b());
    case ElementwiseOp::scale: return scale(a, c);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::softplus: return softplus(a);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::negate: return negate(a);
  }
  throw std::logic_error("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Dense layers

/// x[n x d_in] * W[d_in x d_out] + b[d_out]
inline Var linear(const Var& x, const Var& W, const Var& b) {
  Tape& tape = detail::same_tape(x, W);
  detail::same_tape(x, b);
  detail::require_rank(x, 2, "linear");
  detail::require_rank(W, 2, "linear");
  const std::size_t n = x.shape()[0], k = x.shape()[1], m = W.shape()[1];
  if (W.shape()[0] != k) {
    throw ShapeError("linear: input width " + std::to_string(k) + " vs weight " +
                     shape_str(W.shape()));
  }
  if (b.shape() != Shape{m}) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs output width " +
                     std::to_string(m));
  }
  std::vector<double> out(n * m);
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * m);
  detail::gemm_nn(x.value().data(), W.value().data(), out.data(), n, k, m);
  return tape.record(OpKind::linear, "linear", {x.id(), W.id(), b.id()}, {n, m}, std::move(out),
                     [n, k, m](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0], iw = self.inputs[1],
                                         ib = self.inputs[2];
                       const auto& g = self.grad;
                       if (t.requires_grad(ix)) {
                         detail::gemm_nt(g.data(), t.entry(iw).value.data(), t.grad(ix).data(), n,
                                         m, k);
                       }
                       if (t.requires_grad(iw)) {
                         detail::gemm_tn(t.entry(ix).value.data(), g.data(), t.grad(iw).data(), n,
                                         k, m);
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad(ib);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                       }
                     });
}

/// a[n x k] * b[k x m]
inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), n, k, m);
  return tape.record(OpKind::matmul, "matmul", {a.id(), b.id()}, {n, m}, std::move(out),
                     [n, k, m](Tape& t, const Tape::Entry& self) {
                       const std::size_t ia = self.inputs[0], ib = self.inputs[1];
                       if (t.requires_grad(ia)) {
                         detail::gemm_nt(self.grad.data(), t.entry(ib).value.data(),
                                         t.grad(ia).data(), n, m, k);
                       }
                       if (t.requires_grad(ib)) {
                         detail::gemm_tn(t.entry(ia).value.data(), self.grad.data(),
                                         t.grad(ib).data(), n, k, m);
                       }
                     });
}

/// a[n x k] * b[m x k]^T -> [n x m]; the all-pairs dot-product matrix.
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: width mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  detail::gemm_nt(a.value().data(), b.value().data(), out.data(), n, k, m);
  return tape.record(OpKind::matmul_nt, "matmul_nt", {a.id(), b.id()}, {n, m}, std::move(out),
                     [n, k, m](Tape& t, const Tape::Entry& self) {
                       const std::size_t ia = self.inputs[0], ib = self.inputs[1];
                       if (t.requires_grad(ia)) {
                         detail::gemm_nn(self.grad.data(), t.entry(ib).value.data(),
                                         t.grad(ia).data(), n, m, k);
                       }
                       if (t.requires_grad(ib)) {
                         detail::gemm_tn(self.grad.data(), t.entry(ia).value.data(),
                                         t.grad(ib).data(), n, m, k);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
  std::size_t n, c_in, h, w, c_out, k, stride, pad, out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& kernel, std::size_t stride,
                                      std::size_t pad) {
  if (x.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d: expected x[n,c,h,w] and K[o,c,k,k], got " + shape_str(x) + " and " +
                     shape_str(kernel));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kernel[1] != x[1]) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel[1]) +
                     " input channels, got " + std::to_string(x[1]));
  }
  if (kernel[2] != kernel[3]) throw ShapeError("conv2d: kernel must be square");
  const std::size_t k = kernel[2];
  if (k > x[2] + 2 * pad || k > x[3] + 2 * pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(x));
  }
  Conv2dGeometry g{x[0], x[1], x[2], x[3], kernel[0], k, stride, pad, 0, 0};
  g.out_h = (g.h + 2 * pad - k) / stride + 1;
  g.out_w = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

inline void im2col(const double* img, const Conv2dGeometry& g, double* cols) {
  const std::size_t P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.h) &&
                                iw < static_cast<std::ptrdiff_t>(g.w);
            row[oh * g.out_w + ow] =
                inside ? img[(c * g.h + static_cast<std::size_t>(ih)) * g.w +
                             static_cast<std::size_t>(iw)]
                       : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, const Conv2dGeometry& g, double* img) {
  const std::size_t P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)] +=
                row[oh * g.out_w + ow];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[n,c_in,h,w] with K[c_out,c_in,k,k] under zero padding.
inline Var conv2d(const Var& x, const Var& K, std::size_t stride, std::size_t pad) {
  Tape& tape = detail::same_tape(x, K);
  const Conv2dGeometry g = conv2d_geometry(x.shape(), K.shape(), stride, pad);
  const std::size_t P = g.out_h * g.out_w;
  const std::size_t ckk = g.c_in * g.k * g.k;
  const std::size_t in_sz = g.c_in * g.h * g.w;
  auto cols = std::make_shared<std::vector<double>>(g.n * ckk * P);
  std::vector<double> out(g.n * g.c_out * P, 0.0);
  const double* xv = x.value().data();
  const double* kv = K.value().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    double* c = cols->data() + s * ckk * P;
    detail::im2col(xv + s * in_sz, g, c);
    detail::gemm_nn(kv, c, out.data() + s * g.c_out * P, g.c_out, ckk, P);
  }
  return tape.record(
      OpKind::conv2d, "conv2d", {x.id(), K.id()}, {g.n, g.c_out, g.out_h, g.out_w},
      std::move(out), [g, cols, P, ckk, in_sz](Tape& t, const Tape::Entry& self) {
        const std::size_t ix = self.inputs[0], ik = self.inputs[1];
        const bool want_x = t.requires_grad(ix), want_k = t.requires_grad(ik);
        std::vector<double> gcols(want_x ? ckk * P : 0);
        for (std::size_t s = 0; s < g.n; ++s) {
          const double* gs = self.grad.data() + s * g.c_out * P;
          if (want_k) {
            detail::gemm_nt(gs, cols->data() + s * ckk * P, t.grad(ik).data(), g.c_out, P, ckk);
          }
          if (want_x) {
            std::fill(gcols.begin(), gcols.end(), 0.0);
            detail::gemm_tn(t.entry(ik).value.data(), gs, gcols.data(), g.c_out, ckk, P);
            detail::col2im_add(gcols.data(), g, t.grad(ix).data() + s * in_sz);
          }
        }
      });
}

/// Adds b[c] to every spatial position of channel c of x[n,c,h,w].
inline Var channel_bias(const Var& x, const Var& b) {
  Tape& tape = detail::same_tape(x, b);
  detail::require_rank(x, 4, "channel_bias");
  const Shape& s = x.shape();
  if (b.shape() != Shape{s[1]}) {
    throw ShapeError("channel_bias: bias " + shape_str(b.shape()) + " for input " + shape_str(s));
  }
  const std::size_t hw = s[2] * s[3];
  std::vector<double> out = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[(i / hw) % s[1]];
  return tape.record(OpKind::channel_bias, "channel_bias", {x.id(), b.id()}, s, std::move(out),
                     [hw, c = s[1]](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0], ib = self.inputs[1];
                       if (t.requires_grad(ix)) {
                         auto& gx = t.grad(ix);
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad(ib);
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           gb[(i / hw) % c] += self.grad[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, global_avg_pool, log_sum_exp };

/// Reduce over `axes` (all axes when empty); reduced axes are dropped from the
/// result shape. global_avg_pool ignores `axes` and averages the spatial axes
/// of an [n,c,h,w] input. log_sum_exp is max-shifted.
inline Var reduce(ReduceOp op, const Var& x, std::vector<std::size_t> axes = {}) {
  Tape& tape = x.tape();
  OpKind kind = OpKind::sum;
  switch (op) {
    case ReduceOp::sum: kind = OpKind::sum; break;
    case ReduceOp::mean: kind = OpKind::mean; break;
    case ReduceOp::global_avg_pool:
      kind = OpKind::global_avg_pool;
      detail::require_rank(x, 4, "global_avg_pool");
      axes = {2, 3};
      break;
    case ReduceOp::log_sum_exp: kind = OpKind::log_sum_exp; break;
  }
  const std::string name(op_name(kind));
  for (std::size_t a : axes) {
    if (a < x.shape().size() && x.shape()[a] == 0) throw ShapeError(name + ": empty reduction axis");
  }
  auto map = std::make_shared<detail::ReductionMap>(
      detail::reduction_map(x.shape(), std::move(axes), name));
  const auto& xv = x.value();
  const std::size_t n_out = numel(map->out_shape);
  std::vector<double> out(n_out, 0.0);
  if (kind == OpKind::log_sum_exp) {
    std::vector<double> mx(n_out, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < xv.size(); ++i) mx[map->index[i]] = std::max(mx[map->index[i]], xv[i]);
    for (std::size_t i = 0; i < xv.size(); ++i) out[map->index[i]] += std::exp(xv[i] - mx[map->index[i]]);
    for (std::size_t o = 0; o < n_out; ++o) out[o] = mx[o] + std::log(out[o]);
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) out[map->index[i]] += xv[i];
    if (kind != OpKind::sum) {
      const double inv = 1.0 / static_cast<double>(map->group);
      for (double& v : out) v *= inv;
    }
  }
  return tape.record(kind, name, {x.id()}, map->out_shape, std::move(out),
                     [kind, map](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0];
                       if (!t.requires_grad(ix)) return;
                       auto& gx = t.grad(ix);
                       const auto& g = self.grad;
                       if (kind == OpKind::log_sum_exp) {
                         const auto& xv = t.entry(ix).value;
                         for (std::size_t i = 0; i < gx.size(); ++i) {
                           const std::size_t o = map->index[i];
                           gx[i] += g[o] * std::exp(xv[i] - self.value[o]);
                         }
                       } else {
                         const double f =
                             kind == OpKind::sum ? 1.0 : 1.0 / static_cast<double>(map->group);
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[map->index[i]] * f;
                       }
                     });
}

inline Var sum(const Var& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::sum, x, std::move(axes));
}
inline Var mean(const Var& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::mean, x, std::move(axes));
}
inline Var log_sum_exp(const Var& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::log_sum_exp, x, std::move(axes));
}
inline Var global_avg_pool(const Var& x) { return reduce(ReduceOp::global_avg_pool, x); }

// ---------------------------------------------------------------------------
// Indexing and pairing

/// Row-wise dot products of a[n x d] and b[n x d] -> [n].
inline Var rowdot(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_rank(a, 2, "rowdot");
  detail::require_rank(b, 2, "rowdot");
  if (a.shape() != b.shape()) {
    throw ShapeError("rowdot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += av[i * d + j] * bv[i * d + j];
  return tape.record(OpKind::rowdot, "rowdot", {a.id(), b.id()}, {n}, std::move(out),
                     [n, d](Tape& t, const Tape::Entry& self) {
                       const std::size_t ia = self.inputs[0], ib = self.inputs[1];
                       const auto& av = t.entry(ia).value;
                       const auto& bv = t.entry(ib).value;
                       if (t.requires_grad(ia)) {
                         auto& ga = t.grad(ia);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             ga[i * d + j] += self.grad[i] * bv[i * d + j];
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad(ib);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             gb[i * d + j] += self.grad[i] * av[i * d + j];
                       }
                     });
}

/// Rows x[idx[0]], x[idx[1]], ... of a 2-D input.
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  Tape& tape = x.tape();
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(idx.size() * d);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t m = idx.size();
  return tape.record(OpKind::gather_rows, "gather_rows", {x.id()}, {m, d}, std::move(out),
                     [idx = std::move(idx), d](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0];
                       if (!t.requires_grad(ix)) return;
                       auto& gx = t.grad(ix);
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < d; ++j)
                           gx[idx[r] * d + j] += self.grad[r * d + j];
                     });
}

/// Elements of x (any shape) at flat indices -> [idx.size()].
inline Var gather_flat(const Var& x, std::vector<std::size_t> idx) {
  Tape& tape = x.tape();
  const auto& xv = x.value();
  std::vector<double> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= xv.size()) throw ShapeError("gather_flat: index out of range");
    out[r] = xv[idx[r]];
  }
  const std::size_t m = idx.size();
  return tape.record(OpKind::gather_flat, "gather_flat", {x.id()}, {m}, std::move(out),
                     [idx = std::move(idx)](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0];
                       if (!t.requires_grad(ix)) return;
                       auto& gx = t.grad(ix);
                       for (std::size_t r = 0; r < idx.size(); ++r) gx[idx[r]] += self.grad[r];
                     });
}

inline Var diagonal(const Var& x) {
  detail::require_rank(x, 2, "diagonal");
  const std::size_t n = x.shape()[0];
  if (x.shape()[1] != n) throw ShapeError("diagonal: non-square " + shape_str(x.shape()));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i * n + i;
  return gather_flat(x, std::move(idx));
}

/// Mean of the embedding rows of each sequence, skipping `pad_id` positions.
inline Var embed_mean(const Var& table, const std::vector<std::vector<int>>& sequences, int pad_id) {
  Tape& tape = table.tape();
  detail::require_rank(table, 2, "embed_mean");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  const std::size_t n = sequences.size();
  const auto& tv = table.value();
  std::vector<double> out(n * d, 0.0);
  std::vector<double> inv_count(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (int id : sequences[i]) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw ShapeError("embed_mean: token id " + std::to_string(id) + " outside vocabulary");
      }
      if (id == pad_id) continue;
      ++count;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += tv[static_cast<std::size_t>(id) * d + j];
    }
    if (count == 0) throw std::invalid_argument("embed_mean: sequence contains only padding");
    inv_count[i] = 1.0 / static_cast<double>(count);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv_count[i];
  }
  return tape.record(OpKind::embed_mean, "embed_mean", {table.id()}, {n, d}, std::move(out),
                     [sequences, pad_id, inv_count, d](Tape& t, const Tape::Entry& self) {
                       const std::size_t it = self.inputs[0];
                       if (!t.requires_grad(it)) return;
                       auto& gt = t.grad(it);
                       for (std::size_t i = 0; i < sequences.size(); ++i)
                         for (int id : sequences[i]) {
                           if (id == pad_id) continue;
                           for (std::size_t j = 0; j < d; ++j)
                             gt[static_cast<std::size_t>(id) * d + j] +=
                                 self.grad[i * d + j] * inv_count[i];
                         }
                     });
}

inline Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return x.tape().record(OpKind::reshape, "reshape", {x.id()}, std::move(shape), x.value(),
                         [](Tape& t, const Tape::Entry& self) {
                           const std::size_t ix = self.inputs[0];
                           if (!t.requires_grad(ix)) return;
                           auto& gx = t.grad(ix);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                         });
}

/// Each row of a 2-D input divided by its L2 norm.
inline Var normalize_rows(const Var& x) {
  Tape& tape = x.tape();
  detail::require_rank(x, 2, "normalize_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  const auto& xv = x.value();
  std::vector<double> out(n * d);
  std::vector<double> inv_norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
    if (s == 0.0) throw NumericError("normalize_rows: zero-norm row");
    inv_norm[i] = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv_norm[i];
  }
  return tape.record(OpKind::normalize_rows, "normalize_rows", {x.id()}, {n, d}, out,
                     [out, inv_norm, n, d](Tape& t, const Tape::Entry& self) {
                       const std::size_t ix = self.inputs[0];
                       if (!t.requires_grad(ix)) return;
                       auto& gx = t.grad(ix);
                       for (std::size_t i = 0; i < n; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < d; ++j) dot += self.grad[i * d + j] * out[i * d + j];
                         for (std::size_t j = 0; j < d; ++j)
                           gx[i * d + j] += inv_norm[i] * (self.grad[i * d + j] - dot * out[i * d + j]);
                       }
                     });
}

}  // namespace cliplite
