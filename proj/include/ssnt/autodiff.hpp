#pragma once

// Tape-based reverse-mode automatic differentiation over ssnt::Tensor.
//
// A Tape owns every intermediate value of one forward computation. Leaves are
// copied onto the tape, so parameter stores stay read-only and several tapes
// may run on different threads against the same store.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssnt/tensor.hpp"

namespace ssnt {

enum class Primitive {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kNeg,
  kLogSigmoid,
  kConcat,
  kSlice,
  kSum,
  kLogSumExp,
  kEmbeddingGather,
  kDropout,
  kBroadcastAdd,
  kReshape,
};

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kConstant: return "constant";
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kMatmul: return "matmul";
    case Primitive::kTanh: return "tanh";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kRelu: return "relu";
    case Primitive::kExp: return "exp";
    case Primitive::kLog: return "log";
    case Primitive::kNeg: return "neg";
    case Primitive::kLogSigmoid: return "log_sigmoid";
    case Primitive::kConcat: return "concat";
    case Primitive::kSlice: return "slice";
    case Primitive::kSum: return "sum";
    case Primitive::kLogSumExp: return "logsumexp";
    case Primitive::kEmbeddingGather: return "embedding_gather";
    case Primitive::kDropout: return "dropout";
    case Primitive::kBroadcastAdd: return "broadcast_add";
    case Primitive::kReshape: return "reshape";
  }
  return "unknown";
}

/// Attributes for primitives that need them. Axis -1 means "all axes" for reductions.
struct PrimitiveAttrs {
  int axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double rate = 0.0;
  bool transpose_b = false;
  std::vector<std::size_t> indices;
  Shape shape;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the output adjoint of one record into its inputs via accumulate().
  using Backprop = std::function<void(Tape&, std::span<const double> out_grad)>;

  explicit Tape(std::uint64_t seed = 0) : rng_(seed) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(Primitive::kConstant, {}, std::move(t), false, nullptr); }
  Var leaf(Tensor t) { return push(Primitive::kLeaf, {}, std::move(t), true, nullptr); }

  /// Adds a primitive result. The backprop closure is kept only when some input
  /// requires a gradient.
  Var record(Primitive kind, std::vector<std::size_t> inputs, Tensor value, Backprop backprop) {
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [&](std::size_t i) { return nodes_[i].requires_grad; });
    if (!needs) backprop = nullptr;
    return push(kind, std::move(inputs), std::move(value), needs, std::move(backprop));
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Primitive kind(std::size_t id) const { return nodes_[id].kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Number of differentiable records (entries that will be replayed in reverse).
  std::size_t record_count() const {
    return static_cast<std::size_t>(std::count_if(
        nodes_.begin(), nodes_.end(), [](const Node& n) { return static_cast<bool>(n.backprop); }));
  }

  std::mt19937_64& rng() { return rng_; }

  /// Uniform draw in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  void backward(Var loss) {
    if (nodes_.empty()) throw Error("backward: tape is empty");
    const Tensor& lv = loss.value();
    if (lv.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    }
    if (!std::isfinite(lv[0])) throw Error("backward: loss is not finite");
    adjoints_.assign(nodes_.size(), {});
    adjoints_[loss.id()].assign(1, 1.0);
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.backprop || adjoints_[k].empty()) continue;
      current_ = k;
      n.backprop(*this, adjoints_[k]);
    }
    current_ = kNone;
  }

  /// Adjoint of v after backward(); zeros when v was not reached.
  Tensor grad(Var v) const {
    const Tensor& val = v.value();
    if (v.id() < adjoints_.size() && !adjoints_[v.id()].empty()) {
      return Tensor(val.shape(), adjoints_[v.id()]);
    }
    return Tensor(val.shape(), 0.0);
  }

  void accumulate(std::size_t id, std::span<const double> g) {
    if (!nodes_[id].requires_grad) return;
    auto& a = adjoints_[id];
    if (a.empty()) a.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      a[i] += g[i];
      if (std::isnan(a[i])) {
        throw Error(std::string("backward: NaN gradient produced by op '") +
                    primitive_name(current_ == kNone ? nodes_[id].kind : nodes_[current_].kind) +
                    "'");
      }
    }
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    Primitive kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    Backprop backprop;
  };

  Var push(Primitive kind, std::vector<std::size_t> inputs, Tensor value, bool rg, Backprop bp) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), rg, std::move(bp)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> adjoints_;
  std::mt19937_64 rng_;
  std::size_t current_ = kNone;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& common_tape(Primitive kind, std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ShapeError(std::string(primitive_name(kind)) + ": invalid input");
    if (t && t != &v.tape()) {
      throw ShapeError(std::string(primitive_name(kind)) + ": inputs live on different tapes");
    }
    t = &v.tape();
  }
  return *t;
}

[[noreturn]] inline void shape_mismatch(Primitive kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(primitive_name(kind)) + ": shapes " + shape_str(a) + " and " +
                   shape_str(b) + " do not conform");
}

// Elementwise binary op with scalar broadcasting on either side.
template <class F, class DA, class DB>
Var binary(Primitive kind, Var a, Var b, F f, DA da, DB db) {
  Tape& tape = common_tape(kind, {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool same = x.shape() == y.shape();
  const bool xs = !same && x.numel() == 1;
  const bool ys = !same && !xs && y.numel() == 1;
  if (!same && !xs && !ys) shape_mismatch(kind, x.shape(), y.shape());
  const Shape& out_shape = xs ? y.shape() : x.shape();
  const std::size_t n = shape_numel(out_shape);
  Tensor out(out_shape);
  for (std::size_t k = 0; k < n; ++k) out[k] = f(x[xs ? 0 : k], y[ys ? 0 : k]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      kind, {ia, ib}, std::move(out),
      [ia, ib, xs, ys, n, da, db](Tape& t, std::span<const double> g) {
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        if (t.requires_grad(ia)) {
          std::vector<double> ga(xs ? 1 : n, 0.0);
          for (std::size_t k = 0; k < n; ++k) {
            double v = g[k] == 0.0 ? 0.0 : g[k] * da(x[xs ? 0 : k], y[ys ? 0 : k]);
            ga[xs ? 0 : k] += v;
          }
          t.accumulate(ia, ga);
        }
        if (t.requires_grad(ib)) {
          std::vector<double> gb(ys ? 1 : n, 0.0);
          for (std::size_t k = 0; k < n; ++k) {
            double v = g[k] == 0.0 ? 0.0 : g[k] * db(x[xs ? 0 : k], y[ys ? 0 : k]);
            gb[ys ? 0 : k] += v;
          }
          t.accumulate(ib, gb);
        }
      });
}

// Elementwise unary op; the derivative sees both input and output.
template <class F, class D>
Var unary(Primitive kind, Var a, F f, D d) {
  Tape& tape = common_tape(kind, {a});
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t k = 0; k < x.numel(); ++k) out[k] = f(x[k]);
  const std::size_t ia = a.id();
  const std::size_t self = tape.size();
  return tape.record(kind, {ia}, std::move(out), [ia, self, d](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    std::vector<double> gx(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] = g[k] == 0.0 ? 0.0 : g[k] * d(x[k], y[k]);
    t.accumulate(ia, gx);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) = -log1p(exp(-x)), evaluated without overflow.
inline double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline std::size_t resolve_axis(Primitive kind, int axis, std::size_t rank) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= std::max<std::size_t>(rank, 1)) {
    throw ShapeError(std::string(primitive_name(kind)) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

inline double logsumexp_range(const double* p, std::size_t n, std::size_t stride) {
  double m = kNegInf;
  for (std::size_t k = 0; k < n; ++k) m = std::max(m, p[k * stride]);
  if (m == kNegInf || std::isinf(m)) return m;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(p[k * stride] - m);
  return m + std::log(s);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      Primitive::kAdd, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      Primitive::kSub, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      Primitive::kMul, a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var tanh(Var a) {
  return detail::unary(
      Primitive::kTanh, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(Primitive::kSigmoid, a, detail::stable_sigmoid,
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(Var a) {
  return detail::unary(
      Primitive::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(
      Primitive::kExp, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      Primitive::kLog, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Var neg(Var a) {
  return detail::unary(
      Primitive::kNeg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

/// log(sigmoid(x)); log(1 - sigmoid(x)) is log_sigmoid(neg(x)).
inline Var log_sigmoid(Var a) {
  return detail::unary(Primitive::kLogSigmoid, a, detail::log_sigmoid,
                       [](double x, double) { return detail::stable_sigmoid(-x); });
}

/// Rank-2 product a·b, or a·bᵀ when transpose_b is set.
inline Var matmul(Var a, Var b, bool transpose_b = false) {
  Tape& tape = detail::common_tape(Primitive::kMatmul, {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2) detail::shape_mismatch(Primitive::kMatmul, x.shape(), y.shape());
  const std::size_t m = x.dim(0), k = x.dim(1);
  const std::size_t yk = transpose_b ? y.dim(1) : y.dim(0);
  const std::size_t n = transpose_b ? y.dim(0) : y.dim(1);
  if (yk != k) detail::shape_mismatch(Primitive::kMatmul, x.shape(), y.shape());
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x(i, p);
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += xv * (transpose_b ? y(j, p) : y(p, j));
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(Primitive::kMatmul, {ia, ib}, std::move(out),
                     [ia, ib, m, k, n, transpose_b](Tape& t, std::span<const double> g) {
                       const Tensor& x = t.value(ia);
                       const Tensor& y = t.value(ib);
                       if (t.requires_grad(ia)) {
                         std::vector<double> gx(m * k, 0.0);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) {
                             const double gv = g[i * n + j];
                             if (gv == 0.0) continue;
                             for (std::size_t p = 0; p < k; ++p)
                               gx[i * k + p] += gv * (transpose_b ? y(j, p) : y(p, j));
                           }
                         t.accumulate(ia, gx);
                       }
                       if (t.requires_grad(ib)) {
                         std::vector<double> gy(k * n, 0.0);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double xv = x(i, p);
                             if (xv == 0.0) continue;
                             for (std::size_t j = 0; j < n; ++j) {
                               if (transpose_b) {
                                 gy[j * k + p] += xv * g[i * n + j];
                               } else {
                                 gy[p * n + j] += xv * g[i * n + j];
                               }
                             }
                           }
                         t.accumulate(ib, gy);
                       }
                     });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& tape = detail::common_tape(Primitive::kConcat, {parts.front()});
  const Shape& s0 = parts.front().shape();
  const std::size_t ax = detail::resolve_axis(Primitive::kConcat, axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    if (&p.tape() != &tape) throw ShapeError("concat: inputs live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == s0[d];
    if (!ok) detail::shape_mismatch(Primitive::kConcat, s0, s);
    out_shape[ax] += s[ax];
    ids.push_back(p.id());
    extents.push_back(s[ax]);
  }
  const auto split = detail::split_axis(out_shape, ax);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const Tensor& v = parts[q].value();
    const std::size_t e = extents[q];
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t r = 0; r < e; ++r)
        for (std::size_t in = 0; in < split.inner; ++in)
          out[(o * split.extent + offset + r) * split.inner + in] = v[(o * e + r) * split.inner + in];
    offset += e;
  }
  return tape.record(Primitive::kConcat, ids, std::move(out),
                     [ids, extents, split](Tape& t, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (std::size_t q = 0; q < ids.size(); ++q) {
                         const std::size_t e = extents[q];
                         if (t.requires_grad(ids[q])) {
                           std::vector<double> gq(split.outer * e * split.inner);
                           for (std::size_t o = 0; o < split.outer; ++o)
                             for (std::size_t r = 0; r < e; ++r)
                               for (std::size_t in = 0; in < split.inner; ++in)
                                 gq[(o * e + r) * split.inner + in] =
                                     g[(o * split.extent + offset + r) * split.inner + in];
                           t.accumulate(ids[q], gq);
                         }
                         offset += e;
                       }
                     });
}

/// Entries [begin, end) along `axis`.
inline Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  Tape& tape = detail::common_tape(Primitive::kSlice, {a});
  const Shape& s = a.shape();
  const std::size_t ax = detail::resolve_axis(Primitive::kSlice, axis, s.size());
  if (begin >= end || end > s[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_str(s) + " on axis " + std::to_string(ax));
  }
  const auto split = detail::split_axis(s, ax);
  const std::size_t e = end - begin;
  Shape out_shape = s;
  out_shape[ax] = e;
  Tensor out(out_shape);
  const Tensor& v = a.value();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t r = 0; r < e; ++r)
      for (std::size_t in = 0; in < split.inner; ++in)
        out[(o * e + r) * split.inner + in] = v[(o * split.extent + begin + r) * split.inner + in];
  const std::size_t ia = a.id();
  const std::size_t total = v.numel();
  return tape.record(Primitive::kSlice, {ia}, std::move(out),
                     [ia, split, begin, e, total](Tape& t, std::span<const double> g) {
                       std::vector<double> ga(total, 0.0);
                       for (std::size_t o = 0; o < split.outer; ++o)
                         for (std::size_t r = 0; r < e; ++r)
                           for (std::size_t in = 0; in < split.inner; ++in)
                             ga[(o * split.extent + begin + r) * split.inner + in] =
                                 g[(o * e + r) * split.inner + in];
                       t.accumulate(ia, ga);
                     });
}

namespace detail {

// Shared driver for sum and logsumexp. axis == -1 reduces to a scalar.
template <class Reduce, class Partial>
Var reduce(Primitive kind, Var a, int axis, Reduce reduce_fn, Partial partial) {
  Tape& tape = common_tape(kind, {a});
  const Tensor& v = a.value();
  AxisSplit split;
  Shape out_shape;
  if (axis == -1) {
    split.extent = v.numel();
  } else {
    const std::size_t ax = resolve_axis(kind, axis, v.rank());
    if (v.rank() == 0) {
      split.extent = 1;
    } else {
      split = split_axis(v.shape(), ax);
      out_shape = v.shape();
      out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    }
  }
  Tensor out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t in = 0; in < split.inner; ++in)
      out[o * split.inner + in] =
          reduce_fn(v.data().data() + o * split.extent * split.inner + in, split.extent, split.inner);
  const std::size_t ia = a.id();
  const std::size_t self = tape.size();
  return tape.record(kind, {ia}, std::move(out),
                     [ia, self, split, partial](Tape& t, std::span<const double> g) {
                       const Tensor& x = t.value(ia);
                       const Tensor& y = t.value(self);
                       std::vector<double> ga(x.numel(), 0.0);
                       for (std::size_t o = 0; o < split.outer; ++o)
                         for (std::size_t in = 0; in < split.inner; ++in) {
                           const std::size_t oi = o * split.inner + in;
                           if (g[oi] == 0.0) continue;
                           for (std::size_t r = 0; r < split.extent; ++r) {
                             const std::size_t k = (o * split.extent + r) * split.inner + in;
                             ga[k] = g[oi] * partial(x[k], y[oi]);
                           }
                         }
                       t.accumulate(ia, ga);
                     });
}

}  // namespace detail

inline Var sum(Var a, int axis = -1) {
  return detail::reduce(
      Primitive::kSum, a, axis,
      [](const double* p, std::size_t n, std::size_t stride) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += p[k * stride];
        return s;
      },
      [](double, double) { return 1.0; });
}

/// Stable max-shifted log-sum-exp. All -inf inputs give -inf, and -inf
/// entries receive zero gradient.
inline Var logsumexp(Var a, int axis = -1) {
  return detail::reduce(Primitive::kLogSumExp, a, axis, detail::logsumexp_range,
                        [](double x, double y) {
                          if (x == kNegInf || y == kNegInf) return 0.0;
                          return std::exp(x - y);
                        });
}

/// Rows of a rank-2 table selected by index.
inline Var embedding_gather(Var table, std::vector<std::size_t> indices) {
  Tape& tape = detail::common_tape(Primitive::kEmbeddingGather, {table});
  const Tensor& w = table.value();
  if (w.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2, got " + shape_str(w.shape()));
  if (indices.empty()) throw ShapeError("embedding_gather: empty index list");
  const std::size_t rows = w.dim(0), width = w.dim(1);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    if (indices[p] >= rows) {
      throw ShapeError("embedding_gather: index " + std::to_string(indices[p]) + " at position " +
                       std::to_string(p) + " out of range for table " + shape_str(w.shape()));
    }
  }
  Tensor out(Shape{indices.size(), width});
  for (std::size_t p = 0; p < indices.size(); ++p)
    std::copy_n(w.data().data() + indices[p] * width, width, &out[p * width]);
  const std::size_t it = table.id();
  return tape.record(Primitive::kEmbeddingGather, {it}, std::move(out),
                     [it, idx = std::move(indices), rows, width](Tape& t, std::span<const double> g) {
                       std::vector<double> gw(rows * width, 0.0);
                       for (std::size_t p = 0; p < idx.size(); ++p)
                         for (std::size_t c = 0; c < width; ++c) gw[idx[p] * width + c] += g[p * width + c];
                       t.accumulate(it, gw);
                     });
}

/// Inverted dropout with the mask drawn from the tape RNG. Rate 0 is the identity.
inline Var dropout(Var a, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ShapeError("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  }
  if (rate == 0.0) return a;
  Tape& tape = detail::common_tape(Primitive::kDropout, {a});
  const Tensor& v = a.value();
  std::vector<double> mask(v.numel());
  const double scale = 1.0 / (1.0 - rate);
  for (double& m : mask) m = tape.uniform() >= rate ? scale : 0.0;
  Tensor out(v.shape());
  for (std::size_t k = 0; k < v.numel(); ++k) out[k] = v[k] * mask[k];
  const std::size_t ia = a.id();
  return tape.record(Primitive::kDropout, {ia}, std::move(out),
                     [ia, mask = std::move(mask)](Tape& t, std::span<const double> g) {
                       std::vector<double> ga(g.size());
                       for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * mask[k];
                       t.accumulate(ia, ga);
                     });
}

/// m×n matrix plus a length-n row vector (rank 1 or 1×n) added to every row.
inline Var broadcast_add(Var a, Var bias) {
  Tape& tape = detail::common_tape(Primitive::kBroadcastAdd, {a, bias});
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  const bool ok = x.rank() == 2 && (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1)) &&
                  b.numel() == x.dim(1);
  if (!ok) detail::shape_mismatch(Primitive::kBroadcastAdd, x.shape(), b.shape());
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = x(i, j) + b[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return tape.record(Primitive::kBroadcastAdd, {ia, ib}, std::move(out),
                     [ia, ib, m, n](Tape& t, std::span<const double> g) {
                       t.accumulate(ia, g);
                       if (t.requires_grad(ib)) {
                         std::vector<double> gb(n, 0.0);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                         t.accumulate(ib, gb);
                       }
                     });
}

inline Var reshape(Var a, Shape shape) {
  Tape& tape = detail::common_tape(Primitive::kReshape, {a});
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record(Primitive::kReshape, {ia}, std::move(out),
                     [ia](Tape& t, std::span<const double> g) { t.accumulate(ia, g); });
}

/// Generic entry point used by tests and by tooling that builds graphs from
/// a description; layer code calls the typed functions directly.
inline Var apply_primitive(Primitive kind, const std::vector<Var>& in, const PrimitiveAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::kAdd: arity(2); return add(in[0], in[1]);
    case Primitive::kSub: arity(2); return sub(in[0], in[1]);
    case Primitive::kMul: arity(2); return mul(in[0], in[1]);
    case Primitive::kMatmul: arity(2); return matmul(in[0], in[1], attrs.transpose_b);
    case Primitive::kTanh: arity(1); return tanh(in[0]);
    case Primitive::kSigmoid: arity(1); return sigmoid(in[0]);
    case Primitive::kRelu: arity(1); return relu(in[0]);
    case Primitive::kExp: arity(1); return exp(in[0]);
    case Primitive::kLog: arity(1); return log(in[0]);
    case Primitive::kNeg: arity(1); return neg(in[0]);
    case Primitive::kLogSigmoid: arity(1); return log_sigmoid(in[0]);
    case Primitive::kConcat: return concat(in, attrs.axis);
    case Primitive::kSlice: arity(1); return slice(in[0], attrs.axis, attrs.begin, attrs.end);
    case Primitive::kSum: arity(1); return sum(in[0], attrs.axis);
    case Primitive::kLogSumExp: arity(1); return logsumexp(in[0], attrs.axis);
    case Primitive::kEmbeddingGather: arity(1); return embedding_gather(in[0], attrs.indices);
    case Primitive::kDropout: arity(1); return dropout(in[0], attrs.rate);
    case Primitive::kBroadcastAdd: arity(2); return broadcast_add(in[0], in[1]);
    case Primitive::kReshape: arity(1); return reshape(in[0], attrs.shape);
    case Primitive::kLeaf:
    case Primitive::kConstant: break;
  }
  throw ShapeError(std::string("apply_primitive: '") + primitive_name(kind) + "' is not an operation");
}

// ---------------------------------------------------------------------------
// Parameters

using GradientMap = std::map<std::string, Tensor>;

/// Parameters of one tape, keyed by name.
class BoundParameters {
 public:
  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  friend class ParameterStore;
  std::map<std::string, Var> vars_;
};

/// Named model parameters. Iteration is sorted by name.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (!params_.emplace(name, std::move(t)).second) {
      throw Error("duplicate parameter name '" + name + "'");
    }
    params_.at(name).set_requires_grad(true);
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Copies every parameter onto `tape`, as differentiable leaves unless
  /// `requires_grad` is false (evaluation without a backward graph).
  BoundParameters bind(Tape& tape, bool requires_grad = true) const {
    BoundParameters b;
    for (const auto& [name, t] : params_) b.vars_.emplace(name, requires_grad ? tape.leaf(t) : tape.constant(t));
    return b;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    return a.params_ == b.params_;
  }

 private:
  std::map<std::string, Tensor> params_;
};

/// Reverses the tape from `loss` and collects the gradient of every bound
/// parameter. Parameters the loss does not reach get zero gradients.
inline GradientMap backward(Var loss, const BoundParameters& params) {
  loss.tape().backward(loss);
  GradientMap out;
  for (const auto& [name, v] : params.vars()) out.emplace(name, loss.tape().grad(v));
  return out;
}

/// Sums `src` into `dst`, creating entries on first use.
inline void accumulate_gradients(GradientMap& dst, const GradientMap& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, g);
    } else {
      auto d = it->second.data();
      auto s = g.data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference validation

using LossFn = std::function<Var(Tape&, const BoundParameters&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_entry;
  bool passed = true;
  std::size_t entries = 0;
  std::size_t failing = 0;
  // Smallest gradient change a central difference can see: one ulp of the
  // loss divided by 2h.
  double fd_resolution = 0.0;
  // Max error over entries whose gradient magnitude is at least 10 * fd_resolution / tol.
  double max_resolved_error = 0.0;
};

/// Compares tape gradients with central differences over every parameter entry.
/// Every evaluation of `f` gets a fresh tape seeded with `seed`.
inline GradCheckResult grad_check(const LossFn& f, const ParameterStore& params, double h = 1e-5,
                                  double tol = 1e-6, std::uint64_t seed = 0) {
  if (!(h > 0.0)) throw Error("grad_check: step must be positive");
  auto evaluate = [&](const ParameterStore& p) {
    Tape tape(seed);
    auto bound = p.bind(tape);
    return f(tape, bound).value().item();
  };

  GradientMap analytic;
  double base = 0.0;
  {
    Tape tape(seed);
    auto bound = params.bind(tape);
    Var loss = f(tape, bound);
    base = loss.value().item();
    analytic = backward(loss, bound);
  }
  if (evaluate(params) != base) {
    throw Error("grad_check: loss is not deterministic across forward passes");
  }

  GradCheckResult result;
  result.fd_resolution = (std::nextafter(std::abs(base), std::numeric_limits<double>::infinity()) - std::abs(base)) / (2.0 * h);
  ParameterStore work = params;
  for (auto& [name, tensor] : work) {
    const auto& g = analytic.at(name);
    for (std::size_t k = 0; k < tensor.numel(); ++k) {
      const double orig = tensor[k];
      tensor[k] = orig + h;
      const double up = evaluate(work);
      tensor[k] = orig - h;
      const double down = evaluate(work);
      tensor[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = g[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.entries;
      if (!(err < tol)) ++result.failing;
      if (!(err <= result.max_relative_error)) {
        result.max_relative_error = err;
        result.worst_entry = name + "[" + std::to_string(k) + "]";
      }
      if (denom * tol >= 10.0 * result.fd_resolution) result.max_resolved_error = std::max(result.max_resolved_error, err);
    }
  }
  result.passed = result.max_relative_error < tol;
  return result;
}

}  // namespace ssnt
