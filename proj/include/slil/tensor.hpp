#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slil/error.hpp"

namespace slil {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape: ordered record of backward rules for one forward build.
// ---------------------------------------------------------------------------

struct TapeState {
  bool consumed = false;
};

class Tape {
 public:
  Tape() : state_(std::make_shared<TapeState>()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool consumed() const { return state_->consumed; }
  size_t size() const { return ops_.size(); }
  const std::shared_ptr<TapeState>& state() const { return state_; }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  /// Runs every recorded rule in reverse order, then marks the tape consumed.
  void run_backward() {
    if (state_->consumed) {
      throw Error("backward: tape already consumed (one traversal per forward build)");
    }
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    state_->consumed = true;
    ops_.clear();
  }

 private:
  std::shared_ptr<TapeState> state_;
  std::vector<std::function<void()>> ops_;
};

inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}

inline Tape* active_tape() { return active_tape_slot(); }

/// RAII guard installing a tape as the thread's recording target.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(active_tape_slot()) {
    active_tape_slot() = &tape;
  }
  ~TapeScope() { active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major doubles with optional tape participation.
// ---------------------------------------------------------------------------

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized on first accumulation during backward
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::weak_ptr<TapeState> tape_state;

  bool on_live_tape() const {
    auto s = tape_state.lock();
    return s && !s->consumed;
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    for (int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != static_cast<int64_t>(values.size())) {
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("tensor constructed with non-finite value");
    }
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    Tensor t;
    t.d_ = std::move(d);
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(numel(shape)), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(numel(shape)), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  size_t rank() const { return d_->shape.size(); }
  int64_t dim(size_t axis) const { return d_->shape.at(axis); }
  int64_t size() const { return static_cast<int64_t>(d_->values.size()); }
  bool requires_grad() const { return d_->requires_grad; }

  std::span<const double> data() const { return d_->values; }

  double value() const {
    if (size() != 1) throw ShapeError("value(): tensor is not a scalar, shape " + shape_str(shape()));
    return d_->values[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("at(): index rank mismatch");
    int64_t flat = 0;
    size_t axis = 0;
    for (int64_t i : idx) {
      flat = flat * d_->shape[axis] + i;
      ++axis;
    }
    return d_->values[static_cast<size_t>(flat)];
  }

  /// Raw storage for optimizer updates and buffer maintenance. Rejected while
  /// a live tape still references this tensor.
  std::span<double> mutable_values() {
    if (d_->on_live_tape()) {
      throw Error("in-place mutation of a tensor participating in a live tape");
    }
    return d_->values;
  }

  bool has_grad() const { return !d_->grad.empty(); }

  std::span<const double> grad() const {
    if (!has_grad()) throw Error("grad(): no gradient present (no backward pass reached this tensor)");
    return d_->grad;
  }

  void clear_grad() { d_->grad.clear(); }

  const std::shared_ptr<TensorData>& node() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void check_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

inline void ensure_grad(TensorData& d) {
  if (d.grad.empty()) d.grad.assign(d.values.size(), 0.0);
}

inline bool track(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Builds the op result and, when recording, marks inputs and output as
/// participants of the active tape.
inline Tensor finish(const char* op, Shape shape, std::vector<double> values,
                     bool tracked, std::initializer_list<const Tensor*> inputs) {
  check_finite(op, values);
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (tracked) {
    Tape* tape = active_tape();
    out.node()->requires_grad = true;
    out.node()->tape = tape;
    out.node()->tape_state = tape->state();
    for (const Tensor* t : inputs) {
      t->node()->tape = tape;
      t->node()->tape_state = tape->state();
    }
  }
  return out;
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Materializes x expanded to `target` (length-1 axes and missing leading
/// axes replicate). Backward sums over the replicated axes.
inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
  const Shape& src = x.shape();
  if (src == target) return x;
  size_t n = target.size();
  if (src.size() > n) throw ShapeError("broadcast_to: rank of " + shape_str(src) + " exceeds " + shape_str(target));
  // Source strides aligned to target, zero where replicated.
  std::vector<int64_t> sstride(n, 0);
  auto raw = detail::strides_of(src);
  for (size_t i = 0; i < src.size(); ++i) {
    size_t j = n - src.size() + i;
    if (src[i] == target[j]) {
      sstride[j] = raw[i];
    } else if (src[i] == 1) {
      sstride[j] = 0;
    } else {
      throw ShapeError("cannot broadcast " + shape_str(src) + " to " + shape_str(target));
    }
  }
  int64_t total = numel(target);
  std::vector<double> out(static_cast<size_t>(total));
  auto tstride = detail::strides_of(target);
  const auto& xv = x.node()->values;
  for (int64_t flat = 0; flat < total; ++flat) {
    int64_t rem = flat, si = 0;
    for (size_t i = 0; i < n; ++i) {
      int64_t idx = rem / tstride[i];
      rem %= tstride[i];
      si += idx * sstride[i];
    }
    out[static_cast<size_t>(flat)] = xv[static_cast<size_t>(si)];
  }

  bool tracked = detail::track({&x});
  Tensor result = detail::finish("broadcast_to", target, std::move(out), tracked, {&x});
  if (tracked) {
    auto xd = x.node();
    auto od = result.node();
    Shape tshape = target;
    active_tape()->record([xd, od, tshape, sstride, tstride, n]() {
      if (od->grad.empty() || !xd->requires_grad) return;
      detail::ensure_grad(*xd);
      int64_t total = numel(tshape);
      for (int64_t flat = 0; flat < total; ++flat) {
        int64_t rem = flat, si = 0;
        for (size_t i = 0; i < n; ++i) {
          int64_t idx = rem / tstride[i];
          rem %= tstride[i];
          si += idx * sstride[i];
        }
        xd->grad[static_cast<size_t>(si)] += od->grad[static_cast<size_t>(flat)];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape()) {
    Shape s = broadcast_shape(a.shape(), b.shape());
    return ew_binary(op, broadcast_to(a, s), broadcast_to(b, s), fwd, bwd);
  }
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);

  bool tracked = track({&a, &b});
  Tensor result = finish(op, a.shape(), std::move(out), tracked, {&a, &b});
  if (tracked) {
    auto ad = a.node(); auto bd = b.node(); auto od = result.node();
    active_tape()->record([ad, bd, od, bwd]() {
      if (od->grad.empty()) return;
      if (ad->requires_grad) ensure_grad(*ad);
      if (bd->requires_grad) ensure_grad(*bd);
      for (size_t i = 0; i < od->grad.size(); ++i) {
        auto [da, db] = bwd(ad->values[i], bd->values[i], od->values[i]);
        if (ad->requires_grad) ad->grad[i] += da * od->grad[i];
        if (bd->requires_grad) bd->grad[i] += db * od->grad[i];
      }
    });
  }
  return result;
}

template <class Fwd, class Bwd>
Tensor ew_unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto& av = a.node()->values;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);

  bool tracked = track({&a});
  Tensor result = finish(op, a.shape(), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, bwd]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (size_t i = 0; i < od->grad.size(); ++i) {
        ad->grad[i] += bwd(ad->values[i], od->values[i]) * od->grad[i];
      }
    });
  }
  return result;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::ew_binary("add", a, b,
      [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::ew_binary("sub", a, b,
      [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::ew_binary("mul", a, b,
      [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}

inline Tensor relu(const Tensor& a) {
  // relu'(0) defined as 0.
  return detail::ew_unary("relu", a,
      [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh_op(const Tensor& a) {
  return detail::ew_unary("tanh", a,
      [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::ew_unary("sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_op(const Tensor& a) {
  return detail::ew_unary("exp", a,
      [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
  for (double v : a.data()) {
    if (v <= 0.0) throw NumericError("log: non-positive input");
  }
  return detail::ew_unary("log", a,
      [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::ew_unary("add_scalar", a,
      [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::ew_unary("mul_scalar", a,
      [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

/// Enumerates the elementwise op family by name; the gradcheck registry and
/// config-driven dispatch use this entry point.
enum class EwKind { add, sub, mul, relu, tanh, sigmoid, exp, log };

inline Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr) {
  auto need2 = [&]() -> const Tensor& {
    if (!b) throw ShapeError("elementwise: binary op requires two operands");
    return *b;
  };
  switch (kind) {
    case EwKind::add: return add(a, need2());
    case EwKind::sub: return sub(a, need2());
    case EwKind::mul: return mul(a, need2());
    case EwKind::relu: return relu(a);
    case EwKind::tanh: return tanh_op(a);
    case EwKind::sigmoid: return sigmoid(a);
    case EwKind::exp: return exp_op(a);
    case EwKind::log: return log_op(a);
  }
  throw Error("elementwise: unknown op kind");
}

// ---------------------------------------------------------------------------
// Matrix multiply (Eigen-backed kernel; gradient rules recorded here)
// ---------------------------------------------------------------------------

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    detail::ECMap A(a.data().data(), m, k);
    detail::ECMap B(b.data().data(), k, n);
    detail::EMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  bool tracked = detail::track({&a, &b});
  Tensor result = detail::finish("matmul", {m, n}, std::move(out), tracked, {&a, &b});
  if (tracked) {
    auto ad = a.node(); auto bd = b.node(); auto od = result.node();
    active_tape()->record([ad, bd, od, m, k, n]() {
      if (od->grad.empty()) return;
      detail::ECMap G(od->grad.data(), m, n);
      if (ad->requires_grad) {
        detail::ensure_grad(*ad);
        detail::ECMap B(bd->values.data(), k, n);
        detail::EMap GA(ad->grad.data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bd->requires_grad) {
        detail::ensure_grad(*bd);
        detail::ECMap A(ad->values.data(), m, k);
        detail::EMap GB(bd->grad.data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  int64_t outer, axis, inner;
};

inline AxisSplit split_axis(const Shape& s, size_t axis) {
  if (axis >= s.size()) throw ShapeError("reduce: axis out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape drop_axis(const Shape& s, size_t axis) {
  Shape out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(static_cast<size_t>(sp.outer * sp.inner), 0.0);
  const auto& av = a.node()->values;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t j = 0; j < sp.axis; ++j) {
      const double* src = av.data() + (o * sp.axis + j) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("sum", detail::drop_axis(a.shape(), axis),
                                 std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, sp]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t j = 0; j < sp.axis; ++j) {
          double* dst = ad->grad.data() + (o * sp.axis + j) * sp.inner;
          const double* src = od->grad.data() + o * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

inline Tensor mean(const Tensor& a, size_t axis) {
  return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

inline Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("sum_all", {1}, {total}, tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      double g = od->grad[0];
      for (double& x : ad->grad) x += g;
    });
  }
  return result;
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

struct MaxResult {
  Tensor values;
  std::vector<int64_t> argmax;  // flat layout of the reduced shape
};

/// Max over an axis with argmax; ties break to the lowest index. Gradient
/// routes to the argmax positions.
inline MaxResult max_argmax(const Tensor& a, size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(static_cast<size_t>(sp.outer * sp.inner));
  std::vector<int64_t> arg(out.size());
  const auto& av = a.node()->values;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double best = av[(o * sp.axis) * sp.inner + i];
      int64_t bj = 0;
      for (int64_t j = 1; j < sp.axis; ++j) {
        double v = av[(o * sp.axis + j) * sp.inner + i];
        if (v > best) {
          best = v;
          bj = j;
        }
      }
      out[o * sp.inner + i] = best;
      arg[o * sp.inner + i] = bj;
    }
  }
  bool tracked = detail::track({&a});
  Tensor values = detail::finish("max", detail::drop_axis(a.shape(), axis),
                                 std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = values.node();
    auto argc = arg;
    active_tape()->record([ad, od, argc, sp]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
          int64_t j = argc[o * sp.inner + i];
          ad->grad[(o * sp.axis + j) * sp.inner + i] += od->grad[o * sp.inner + i];
        }
      }
    });
  }
  return {std::move(values), std::move(arg)};
}

// ---------------------------------------------------------------------------
// Movement ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  bool tracked = detail::track({&a});
  std::vector<double> out(a.data().begin(), a.data().end());
  Tensor result = detail::finish("reshape", std::move(shape), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
  }
  return result;
}

inline Tensor permute(const Tensor& a, const std::vector<size_t>& perm) {
  if (perm.size() != a.rank()) throw ShapeError("permute: rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  auto in_strides = detail::strides_of(a.shape());
  auto out_strides = detail::strides_of(out_shape);
  int64_t total = a.size();
  std::vector<double> out(static_cast<size_t>(total));
  const auto& av = a.node()->values;
  std::vector<int64_t> src_stride(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_strides[perm[i]];
  for (int64_t flat = 0; flat < total; ++flat) {
    int64_t rem = flat, si = 0;
    for (size_t i = 0; i < perm.size(); ++i) {
      int64_t idx = rem / out_strides[i];
      rem %= out_strides[i];
      si += idx * src_stride[i];
    }
    out[static_cast<size_t>(flat)] = av[static_cast<size_t>(si)];
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("permute", std::move(out_shape), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    size_t n = perm.size();
    active_tape()->record([ad, od, out_strides, src_stride, n, total]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t flat = 0; flat < total; ++flat) {
        int64_t rem = flat, si = 0;
        for (size_t i = 0; i < n; ++i) {
          int64_t idx = rem / out_strides[i];
          rem %= out_strides[i];
          si += idx * src_stride[i];
        }
        ad->grad[static_cast<size_t>(si)] += od->grad[static_cast<size_t>(flat)];
      }
    });
  }
  return result;
}

/// Swaps the last two axes of a rank-3 tensor ([B,X,Y] -> [B,Y,X]).
inline Tensor transpose12(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("transpose12: expects rank-3");
  return permute(a, {0, 2, 1});
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: expects rank-2");
  return permute(a, {1, 0});
}

inline Tensor slice(const Tensor& a, size_t axis, int64_t start, int64_t length) {
  auto sp = detail::split_axis(a.shape(), axis);
  if (start < 0 || length <= 0 || start + length > sp.axis) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of bounds for axis size " +
                     std::to_string(sp.axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(static_cast<size_t>(sp.outer * length * sp.inner));
  const auto& av = a.node()->values;
  for (int64_t o = 0; o < sp.outer; ++o) {
    const double* src = av.data() + (o * sp.axis + start) * sp.inner;
    double* dst = out.data() + o * length * sp.inner;
    std::copy(src, src + length * sp.inner, dst);
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("slice", std::move(out_shape), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, sp, start, length]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t o = 0; o < sp.outer; ++o) {
        double* dst = ad->grad.data() + (o * sp.axis + start) * sp.inner;
        const double* src = od->grad.data() + o * length * sp.inner;
        for (int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

/// Gathers `count` entries along `axis` starting at `start`, `step` apart.
/// Backward scatter-adds into the gathered positions.
inline Tensor stride_slice(const Tensor& a, size_t axis, int64_t start, int64_t step,
                           int64_t count) {
  auto sp = detail::split_axis(a.shape(), axis);
  if (start < 0 || step <= 0 || count <= 0 || start + step * (count - 1) >= sp.axis) {
    throw ShapeError("stride_slice: out of bounds for axis size " + std::to_string(sp.axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = count;
  std::vector<double> out(static_cast<size_t>(sp.outer * count * sp.inner));
  const auto& av = a.node()->values;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t j = 0; j < count; ++j) {
      const double* src = av.data() + (o * sp.axis + start + j * step) * sp.inner;
      double* dst = out.data() + (o * count + j) * sp.inner;
      std::copy(src, src + sp.inner, dst);
    }
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("stride_slice", std::move(out_shape), std::move(out),
                                 tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, sp, start, step, count]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t j = 0; j < count; ++j) {
          double* dst = ad->grad.data() + (o * sp.axis + start + j * step) * sp.inner;
          const double* src = od->grad.data() + (o * count + j) * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

/// Reverses the order of entries along one axis.
inline Tensor flip(const Tensor& a, size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.node()->values.size());
  const auto& av = a.node()->values;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t j = 0; j < sp.axis; ++j) {
      const double* src = av.data() + (o * sp.axis + j) * sp.inner;
      double* dst = out.data() + (o * sp.axis + (sp.axis - 1 - j)) * sp.inner;
      std::copy(src, src + sp.inner, dst);
    }
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("flip", a.shape(), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, sp]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t j = 0; j < sp.axis; ++j) {
          double* dst = ad->grad.data() + (o * sp.axis + j) * sp.inner;
          const double* src = od->grad.data() + (o * sp.axis + (sp.axis - 1 - j)) * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& base = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != base.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < base.size(); ++i) {
      if (i != axis && p.shape()[i] != base[i]) {
        throw ShapeError("concat: shape mismatch off the concat axis");
      }
    }
    axis_total += p.dim(axis);
  }
  Shape out_shape = base;
  out_shape[axis] = axis_total;
  auto osp = detail::split_axis(out_shape, axis);
  std::vector<double> out(static_cast<size_t>(numel(out_shape)));
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    auto sp = detail::split_axis(p.shape(), axis);
    const auto& pv = p.node()->values;
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* src = pv.data() + o * sp.axis * sp.inner;
      double* dst = out.data() + (o * osp.axis + offset) * osp.inner;
      std::copy(src, src + sp.axis * sp.inner, dst);
    }
    offset += p.dim(axis);
  }
  bool tracked = false;
  if (active_tape()) {
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  detail::check_finite("concat", out);
  Tensor result = Tensor::from(out_shape, std::move(out));
  if (tracked) {
    Tape* tape = active_tape();
    result.node()->requires_grad = true;
    result.node()->tape = tape;
    result.node()->tape_state = tape->state();
    std::vector<std::shared_ptr<TensorData>> pd;
    for (const Tensor& p : parts) {
      pd.push_back(p.node());
      p.node()->tape = tape;
      p.node()->tape_state = tape->state();
    }
    auto od = result.node();
    tape->record([pd, od, osp, axis]() {
      if (od->grad.empty()) return;
      int64_t offset = 0;
      for (const auto& d : pd) {
        auto sp = detail::split_axis(d->shape, axis);
        if (d->requires_grad) {
          detail::ensure_grad(*d);
          for (int64_t o = 0; o < sp.outer; ++o) {
            double* dst = d->grad.data() + o * sp.axis * sp.inner;
            const double* src = od->grad.data() + (o * osp.axis + offset) * osp.inner;
            for (int64_t i = 0; i < sp.axis * sp.inner; ++i) dst[i] += src[i];
          }
        }
        offset += sp.axis;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// log-softmax over the last axis (numerically stable primitive)
// ---------------------------------------------------------------------------

inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("log_softmax: needs at least rank 1");
  int64_t cols = a.dim(a.rank() - 1);
  int64_t rows = a.size() / cols;
  std::vector<double> out(static_cast<size_t>(a.size()));
  const auto& av = a.node()->values;
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(x[c] - mx);
    double lse = mx + std::log(s);
    for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  bool tracked = detail::track({&a});
  Tensor result = detail::finish("log_softmax", a.shape(), std::move(out), tracked, {&a});
  if (tracked) {
    auto ad = a.node(); auto od = result.node();
    active_tape()->record([ad, od, rows, cols]() {
      if (od->grad.empty() || !ad->requires_grad) return;
      detail::ensure_grad(*ad);
      for (int64_t r = 0; r < rows; ++r) {
        const double* g = od->grad.data() + r * cols;
        const double* y = od->values.data() + r * cols;
        double gsum = 0.0;
        for (int64_t c = 0; c < cols; ++c) gsum += g[c];
        double* dx = ad->grad.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) dx[c] += g[c] - std::exp(y[c]) * gsum;
      }
    });
  }
  return result;
}

/// Value copy detached from any tape.
inline Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The tape is
/// consumed; a second call on the same build throws.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  auto d = loss.node();
  auto state = d->tape_state.lock();
  if (!d->tape || !state) {
    throw Error("backward: loss is not attached to a tape");
  }
  if (state->consumed) {
    throw Error("backward: tape already consumed (one traversal per forward build)");
  }
  d->grad.assign(1, 1.0);
  d->tape->run_backward();
}

}  // namespace slil
