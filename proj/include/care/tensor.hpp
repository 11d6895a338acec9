#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

// Dense row-major tensors with reverse-mode automatic differentiation.
// Ops executed while a Tape is alive are recorded in execution order;
// Tape::backward walks the record in exact reverse order and accumulates
// gradients (+=) so multiple uses of a tensor sum their contributions.
// Tensors are immutable once consumed by an op; one tape per thread.

namespace care {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  r += ")";
  return r;
}

struct TensorError : std::runtime_error {
  std::string op;
  Shape lhs, rhs;
  TensorError(std::string op_, std::string what_, Shape lhs_ = {},
              Shape rhs_ = {})
      : std::runtime_error("tensor op '" + op_ + "': " + what_ +
                           (lhs_.empty() ? "" : " lhs=" + shape_str(lhs_)) +
                           (rhs_.empty() ? "" : " rhs=" + shape_str(rhs_))),
        op(std::move(op_)),
        lhs(std::move(lhs_)),
        rhs(std::move(rhs_)) {}
};

template <class S>
class Tape;

template <class S>
struct Node {
  Shape shape;
  std::vector<S> v;
  bool requires_grad = false;  // leaf that wants .grad populated
  bool needs_grad = false;     // participates in the recorded graph
  std::vector<S> g;            // leaf gradient accumulator
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<S>&, Tape<S>&)> back;
};

template <class S>
class Tensor {
 public:
  Tensor() : n_(std::make_shared<Node<S>>()) {}
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<S> data) {
    if ((int64_t)data.size() != numel_of(shape))
      throw TensorError("from", "data size does not match shape", shape);
    for (S x : data)
      if (!std::isfinite((double)x))
        throw TensorError("from", "non-finite input value", shape);
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->v = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node<S>>();
    n->v.assign(numel_of(shape), S(0));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, double val) {
    auto n = std::make_shared<Node<S>>();
    n->v.assign(numel_of(shape), S(val));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double val) { return full({1}, val); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<S> d(numel_of(shape));
    for (auto& x : d) x = S(dist(rng) * sigma);
    return from(std::move(shape), std::move(d));
  }
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo,
                        double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<S> d(numel_of(shape));
    for (auto& x : d) x = S(dist(rng));
    return from(std::move(shape), std::move(d));
  }

  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[i]; }
  int rank() const { return (int)n_->shape.size(); }
  int64_t numel() const { return (int64_t)n_->v.size(); }
  const std::vector<S>& value() const { return n_->v; }
  std::vector<S>& mutable_value() { return n_->v; }
  S item() const {
    if (n_->v.size() != 1)
      throw TensorError("item", "tensor is not a scalar", n_->shape);
    return n_->v[0];
  }
  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<S>& grad() const {
    if (n_->g.empty()) n_->g.assign(n_->v.size(), S(0));
    return n_->g;
  }
  void zero_grad() { n_->g.assign(n_->v.size(), S(0)); }
  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

template <class S>
class Tape {
 public:
  Tape() {
    prev_ = current_;
    current_ = this;
  }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  void record(const std::shared_ptr<Node<S>>& n) {
    for (auto& p : n->parents)
      if (p->requires_grad && seen_.insert(p.get()).second)
        leaves_.push_back(p);
    ops_.push_back(n);
  }

  std::vector<S>& gbuf(Node<S>* n) {
    auto& buf = grads_[n];
    if (buf.empty()) buf.assign(n->v.size(), S(0));
    return buf;
  }

  // Reverse walk over the recorded ops. Topological order holds by
  // construction (an op is recorded after its inputs), so every node's
  // gradient is complete before its backward fn runs.
  void backward(const Tensor<S>& loss, bool flush = true) {
    if (loss.numel() != 1)
      throw TensorError("backward", "loss must be a scalar", loss.shape());
    grads_.clear();
    gbuf(loss.node().get())[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      Node<S>* n = it->get();
      auto g = grads_.find(n);
      if (g != grads_.end() && n->back) n->back(g->second, *this);
    }
    if (flush) flush_leaf_grads();
  }

  // Adds the computed leaf gradients into each leaf's .grad accumulator.
  // Kept separate so concurrent per-sample tapes can be flushed in a fixed
  // sample order by the caller.
  void flush_leaf_grads() {
    for (auto& leaf : leaves_) {
      auto g = grads_.find(leaf.get());
      if (g == grads_.end()) continue;
      auto& acc = leaf->g;
      if (acc.empty()) acc.assign(leaf->v.size(), S(0));
      const auto& src = g->second;
      for (size_t i = 0; i < src.size(); ++i) acc[i] += src[i];
    }
  }

  const std::vector<S>* grad_of(const Tensor<S>& t) const {
    auto it = grads_.find(t.node().get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  size_t op_count() const { return ops_.size(); }

 private:
  std::vector<std::shared_ptr<Node<S>>> ops_;
  std::vector<std::shared_ptr<Node<S>>> leaves_;
  std::unordered_set<Node<S>*> seen_;
  std::unordered_map<Node<S>*, std::vector<S>> grads_;
  Tape* prev_ = nullptr;
  static thread_local Tape* current_;
};

template <class S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

namespace detail {

template <class S>
inline void check_finite(const char* op, const std::vector<S>& v,
                         const Shape& a, const Shape& b = {}) {
  for (S x : v)
    if (!std::isfinite((double)x))
      throw TensorError(op, "non-finite value produced", a, b);
}

template <class S>
inline bool wants_grad(const Node<S>* n) {
  return n->requires_grad || n->needs_grad;
}

template <class S>
inline std::shared_ptr<Node<S>> new_node(
    const char* op, Shape shape, std::vector<S> vals,
    std::vector<std::shared_ptr<Node<S>>> parents, const Shape& rhs = {}) {
  check_finite(op, vals, shape, rhs);
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->v = std::move(vals);
  if (Tape<S>::current()) {
    bool ng = false;
    for (auto& p : parents) ng = ng || wants_grad(p.get());
    if (ng) {
      n->needs_grad = true;
      n->parents = std::move(parents);
      Tape<S>::current()->record(n);
    }
  }
  return n;
}

// Broadcast pairings for binary elementwise ops. Cases beyond what the
// modules need are rejected with a structured shape error.
enum class Bc { Same, AScalar, BScalar, ARow, BRow, ACol, BCol };

struct BcPlan {
  Bc kind;
  Shape out;
  int rows, cols;
};

inline BcPlan resolve_bc(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {Bc::Same, a, 1, (int)numel_of(a)};
  if (numel_of(a) == 1) return {Bc::AScalar, b, 1, (int)numel_of(b)};
  if (numel_of(b) == 1) return {Bc::BScalar, a, 1, (int)numel_of(a)};
  if (a.size() == 2 && b.size() == 1 && a[1] == b[0])
    return {Bc::BRow, a, a[0], a[1]};
  if (a.size() == 1 && b.size() == 2 && b[1] == a[0])
    return {Bc::ARow, b, b[0], b[1]};
  if (a.size() == 2 && b.size() == 2 && a[1] == b[1] && b[0] == 1)
    return {Bc::BRow, a, a[0], a[1]};
  if (a.size() == 2 && b.size() == 2 && a[1] == b[1] && a[0] == 1)
    return {Bc::ARow, b, b[0], b[1]};
  if (a.size() == 2 && b.size() == 2 && a[0] == b[0] && b[1] == 1)
    return {Bc::BCol, a, a[0], a[1]};
  if (a.size() == 2 && b.size() == 2 && a[0] == b[0] && a[1] == 1)
    return {Bc::ACol, b, b[0], b[1]};
  throw TensorError(op, "incompatible shapes", a, b);
}

// fn(out_index, a_index, b_index)
template <class Fn>
inline void bc_loop(const BcPlan& p, Fn&& fn) {
  const int rows = p.rows, cols = p.cols;
  switch (p.kind) {
    case Bc::Same: {
      int n = rows * cols;
      for (int i = 0; i < n; ++i) fn(i, i, i);
      break;
    }
    case Bc::AScalar: {
      int n = rows * cols;
      for (int i = 0; i < n; ++i) fn(i, 0, i);
      break;
    }
    case Bc::BScalar: {
      int n = rows * cols;
      for (int i = 0; i < n; ++i) fn(i, i, 0);
      break;
    }
    case Bc::ARow:
      for (int r = 0, i = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c, ++i) fn(i, c, i);
      break;
    case Bc::BRow:
      for (int r = 0, i = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c, ++i) fn(i, i, c);
      break;
    case Bc::ACol:
      for (int r = 0, i = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c, ++i) fn(i, r, i);
      break;
    case Bc::BCol:
      for (int r = 0, i = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c, ++i) fn(i, i, r);
      break;
  }
}

// FwdFn: S(S a, S b); DaFn/DbFn: S(S a, S b, S go)
template <class S, class FwdFn, class DaFn, class DbFn>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    FwdFn fwd, DaFn da, DbFn db) {
  BcPlan plan = resolve_bc(name, a.shape(), b.shape());
  std::vector<S> out(numel_of(plan.out));
  const S* av = a.value().data();
  const S* bv = b.value().data();
  bc_loop(plan, [&](int i, int ia, int ib) { out[i] = fwd(av[ia], bv[ib]); });
  auto n = new_node<S>(name, plan.out, std::move(out), {a.node(), b.node()},
                       b.shape());
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    Node<S>* bn = b.node().get();
    n->back = [an, bn, plan, da, db](const std::vector<S>& go, Tape<S>& tp) {
      const S* av2 = an->v.data();
      const S* bv2 = bn->v.data();
      if (wants_grad(an)) {
        auto& ga = tp.gbuf(an);
        bc_loop(plan, [&](int i, int ia, int ib) {
          ga[ia] += da(av2[ia], bv2[ib], go[i]);
        });
      }
      if (wants_grad(bn)) {
        auto& gb = tp.gbuf(bn);
        bc_loop(plan, [&](int i, int ia, int ib) {
          gb[ib] += db(av2[ia], bv2[ib], go[i]);
        });
      }
    };
  }
  return Tensor<S>(n);
}

// FwdFn: S(S x); DFn: S(S x, S y, S go) where y is the op output
template <class S, class FwdFn, class DFn>
Tensor<S> unary_op(const char* name, const Tensor<S>& a, FwdFn fwd, DFn dfn) {
  std::vector<S> out(a.numel());
  const S* av = a.value().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = fwd(av[i]);
  auto n = new_node<S>(name, a.shape(), std::move(out), {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    Node<S>* on = n.get();
    n->back = [an, on, dfn](const std::vector<S>& go, Tape<S>& tp) {
      if (!wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      const S* av2 = an->v.data();
      const S* ov = on->v.data();
      for (size_t i = 0; i < go.size(); ++i)
        ga[i] += dfn(av2[i], ov[i], go[i]);
    };
  }
  return Tensor<S>(n);
}

// C{m,n} += A{m,k} . B{k,n}
template <class S>
inline void gemm_nn(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int i = 0; i < m; ++i) {
    const S* a = A + (size_t)i * k;
    S* c = C + (size_t)i * n;
    for (int p = 0; p < k; ++p) {
      const S av = a[p];
      const S* b = B + (size_t)p * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C{m,n} += A{m,k} . B^T where B{n,k}
template <class S>
inline void gemm_nt(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int i = 0; i < m; ++i) {
    const S* a = A + (size_t)i * k;
    S* c = C + (size_t)i * n;
    for (int j = 0; j < n; ++j) {
      const S* b = B + (size_t)j * k;
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C{m,n} += A^T . B where A{k,m}, B{k,n}
template <class S>
inline void gemm_tn(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int p = 0; p < k; ++p) {
    const S* a = A + (size_t)p * m;
    const S* b = B + (size_t)p * n;
    for (int i = 0; i < m; ++i) {
      const S av = a[i];
      S* c = C + (size_t)i * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// ---- elementwise ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S, S, S go) { return go; }, [](S, S, S go) { return go; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S, S, S go) { return go; }, [](S, S, S go) { return S(-go); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S, S y, S go) { return S(go * y); },
      [](S x, S, S go) { return S(go * x); });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "div", a, b, [](S x, S y) { return x / y; },
      [](S, S y, S go) { return S(go / y); },
      [](S x, S y, S go) { return S(-go * x / (y * y)); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "neg", a, [](S x) { return S(-x); },
      [](S, S, S go) { return S(-go); });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  const S cs = S(c);
  return detail::unary_op<S>(
      "add_scalar", a, [cs](S x) { return S(x + cs); },
      [](S, S, S go) { return go; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  const S cs = S(c);
  return detail::unary_op<S>(
      "mul_scalar", a, [cs](S x) { return S(x * cs); },
      [cs](S, S, S go) { return S(go * cs); });
}

// c - a
template <class S>
Tensor<S> rsub_scalar(double c, const Tensor<S>& a) {
  const S cs = S(c);
  return detail::unary_op<S>(
      "rsub_scalar", a, [cs](S x) { return S(cs - x); },
      [](S, S, S go) { return S(-go); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "exp", a, [](S x) { return S(std::exp((double)x)); },
      [](S, S y, S go) { return S(go * y); });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "log", a, [](S x) { return S(std::log((double)x)); },
      [](S x, S, S go) { return S(go / x); });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "sqrt", a, [](S x) { return S(std::sqrt((double)x)); },
      [](S, S y, S go) { return S(go / (S(2) * y)); });
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "abs", a, [](S x) { return S(std::fabs((double)x)); },
      [](S x, S, S go) { return S(x > 0 ? go : (x < 0 ? -go : S(0))); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "sigmoid", a, [](S x) { return S(1.0 / (1.0 + std::exp((double)-x))); },
      [](S, S y, S go) { return S(go * y * (S(1) - y)); });
}

template <class S>
Tensor<S> tanh(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "tanh", a, [](S x) { return S(std::tanh((double)x)); },
      [](S, S y, S go) { return S(go * (S(1) - y * y)); });
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary_op<S>(
      "relu", a, [](S x) { return x > 0 ? x : S(0); },
      [](S x, S, S go) { return x > 0 ? go : S(0); });
}

// Exact gelu: x * Phi(x) with the normal CDF.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return detail::unary_op<S>(
      "gelu", a,
      [](S x) {
        double xd = (double)x;
        return S(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
      },
      [](S x, S, S go) {
        double xd = (double)x;
        double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        double dens = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return S((double)go * (phi + xd * dens));
      });
}

template <class S>
Tensor<S> clip(const Tensor<S>& a, double lo, double hi) {
  const S l = S(lo), h = S(hi);
  return detail::unary_op<S>(
      "clip", a, [l, h](S x) { return x < l ? l : (x > h ? h : x); },
      [l, h](S x, S, S go) { return (x > l && x < h) ? go : S(0); });
}

// ---- shape ----

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw TensorError("reshape", "element count mismatch", a.shape(), shape);
  auto n = detail::new_node<S>("reshape", shape, std::vector<S>(a.value()),
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    n->back = [an](const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.rank() != 2)
    throw TensorError("transpose2d", "expects rank 2", a.shape());
  const int m = a.dim(0), k = a.dim(1);
  std::vector<S> out((size_t)m * k);
  const S* av = a.value().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) out[(size_t)j * m + i] = av[(size_t)i * k + j];
  auto n = detail::new_node<S>("transpose2d", {k, m}, std::move(out),
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    n->back = [an, m, k](const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < m; ++i)
          ga[(size_t)i * k + j] += go[(size_t)j * m + i];
    };
  }
  return Tensor<S>(n);
}

namespace detail {
inline void axis_strides(const Shape& s, int axis, int64_t& outer,
                         int64_t& mid, int64_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  mid = s[axis];
  inner = 1;
  for (int i = axis + 1; i < (int)s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
  if (axis < 0 || axis >= a.rank())
    throw TensorError("slice", "axis out of range", a.shape());
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw TensorError("slice", "range out of bounds", a.shape());
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  int64_t outer, mid, inner;
  detail::axis_strides(a.shape(), axis, outer, mid, inner);
  std::vector<S> out((size_t)outer * len * inner);
  const S* av = a.value().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(av + (o * mid + start) * inner,
              av + (o * mid + start + len) * inner,
              out.begin() + o * len * inner);
  auto n = detail::new_node<S>("slice", out_shape, std::move(out), {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    n->back = [an, outer, mid, inner, start, len](const std::vector<S>& go,
                                                  Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      for (int64_t o = 0; o < outer; ++o) {
        const S* src = go.data() + o * len * inner;
        S* dst = ga.data() + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat", "no inputs");
  Shape out_shape = parts[0].shape();
  if (axis < 0 || axis >= (int)out_shape.size())
    throw TensorError("concat", "axis out of range", out_shape);
  int total = 0;
  for (auto& p : parts) {
    Shape s = p.shape();
    if ((int)s.size() != (int)out_shape.size())
      throw TensorError("concat", "rank mismatch", out_shape, s);
    for (int i = 0; i < (int)s.size(); ++i)
      if (i != axis && s[i] != out_shape[i])
        throw TensorError("concat", "shape mismatch", out_shape, s);
    total += s[axis];
  }
  out_shape[axis] = total;
  int64_t outer, mid, inner;
  detail::axis_strides(out_shape, axis, outer, mid, inner);
  std::vector<S> out((size_t)numel_of(out_shape));
  std::vector<std::shared_ptr<Node<S>>> parent_nodes;
  std::vector<int> lens;
  int off = 0;
  for (auto& p : parts) {
    const int len = p.shape()[axis];
    const S* pv = p.value().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pv + o * len * inner, pv + (o + 1) * len * inner,
                out.begin() + (o * mid + off) * inner);
    off += len;
    parent_nodes.push_back(p.node());
    lens.push_back(len);
  }
  auto n = detail::new_node<S>("concat", out_shape, std::move(out),
                               std::move(parent_nodes));
  if (n->needs_grad) {
    std::vector<Node<S>*> raw;
    for (auto& p : n->parents) raw.push_back(p.get());
    n->back = [raw, lens, outer, mid, inner](const std::vector<S>& go,
                                             Tape<S>& tp) {
      int off2 = 0;
      for (size_t pi = 0; pi < raw.size(); ++pi) {
        const int len = lens[pi];
        if (detail::wants_grad(raw[pi])) {
          auto& ga = tp.gbuf(raw[pi]);
          for (int64_t o = 0; o < outer; ++o) {
            const S* src = go.data() + (o * mid + off2) * inner;
            S* dst = ga.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
        off2 += len;
      }
    };
  }
  return Tensor<S>(n);
}

// ---- matmul ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw TensorError("matmul", "incompatible shapes", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
  std::vector<S> out((size_t)m * n2, S(0));
  detail::gemm_nn(m, n2, k, a.value().data(), b.value().data(), out.data());
  auto n = detail::new_node<S>("matmul", {m, n2}, std::move(out),
                               {a.node(), b.node()}, b.shape());
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    Node<S>* bn = b.node().get();
    n->back = [an, bn, m, k, n2](const std::vector<S>& go, Tape<S>& tp) {
      if (detail::wants_grad(an))
        detail::gemm_nt(m, k, n2, go.data(), bn->v.data(),
                        tp.gbuf(an).data());
      if (detail::wants_grad(bn))
        detail::gemm_tn(k, n2, m, an->v.data(), go.data(),
                        tp.gbuf(bn).data());
    };
  }
  return Tensor<S>(n);
}

// ---- reductions ----

template <class S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis, bool keepdim = false) {
  if (axis < 0 || axis >= a.rank())
    throw TensorError("sum_axis", "axis out of range", a.shape());
  int64_t outer, mid, inner;
  detail::axis_strides(a.shape(), axis, outer, mid, inner);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<S> out((size_t)outer * inner, S(0));
  const S* av = a.value().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m2 = 0; m2 < mid; ++m2) {
      const S* src = av + (o * mid + m2) * inner;
      S* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto n = detail::new_node<S>("sum_axis", out_shape, std::move(out),
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    n->back = [an, outer, mid, inner](const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m2 = 0; m2 < mid; ++m2) {
          const S* src = go.data() + o * inner;
          S* dst = ga.data() + (o * mid + m2) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis, bool keepdim = false) {
  return mul_scalar(sum_axis(a, axis, keepdim), 1.0 / a.dim(axis));
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  // Accumulate in double so large reductions stay order-stable in precision.
  double acc = 0;
  for (S x : a.value()) acc += (double)x;
  auto n = detail::new_node<S>("sum_all", {1}, std::vector<S>{S(acc)},
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    n->back = [an](const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      for (auto& g : ga) g += go[0];
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), 1.0 / (double)a.numel());
}

// ---- normalization ----

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw TensorError("softmax", "axis out of range", a.shape());
  int64_t outer, mid, inner;
  detail::axis_strides(a.shape(), axis, outer, mid, inner);
  std::vector<S> out(a.numel());
  const S* av = a.value().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * mid * inner + i;
      double mx = -1e300;
      for (int64_t m2 = 0; m2 < mid; ++m2)
        mx = std::max(mx, (double)av[base + m2 * inner]);
      double z = 0;
      for (int64_t m2 = 0; m2 < mid; ++m2) {
        double e = std::exp((double)av[base + m2 * inner] - mx);
        out[base + m2 * inner] = S(e);
        z += e;
      }
      for (int64_t m2 = 0; m2 < mid; ++m2)
        out[base + m2 * inner] = S((double)out[base + m2 * inner] / z);
    }
  auto n = detail::new_node<S>("softmax", a.shape(), std::move(out),
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    Node<S>* on = n.get();
    n->back = [an, on, outer, mid, inner](const std::vector<S>& go,
                                          Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      const S* ov = on->v.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * mid * inner + i;
          double dot = 0;
          for (int64_t m2 = 0; m2 < mid; ++m2)
            dot += (double)go[base + m2 * inner] *
                   (double)ov[base + m2 * inner];
          for (int64_t m2 = 0; m2 < mid; ++m2) {
            const int64_t ix = base + m2 * inner;
            ga[ix] += S((double)ov[ix] * ((double)go[ix] - dot));
          }
        }
    };
  }
  return Tensor<S>(n);
}

// Normalizes over the last axis; affine parameters are composed outside.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, double eps = 1e-5) {
  if (a.rank() < 1)
    throw TensorError("layer_norm", "expects rank >= 1", a.shape());
  const int64_t d = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / d;
  std::vector<S> out(a.numel());
  std::vector<S> inv_std(rows);
  const S* av = a.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = av + r * d;
    double mu = 0;
    for (int64_t i = 0; i < d; ++i) mu += (double)x[i];
    mu /= (double)d;
    double var = 0;
    for (int64_t i = 0; i < d; ++i) {
      double c = (double)x[i] - mu;
      var += c * c;
    }
    var /= (double)d;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = S(inv);
    S* y = out.data() + r * d;
    for (int64_t i = 0; i < d; ++i) y[i] = S(((double)x[i] - mu) * inv);
  }
  auto n = detail::new_node<S>("layer_norm", a.shape(), std::move(out),
                               {a.node()});
  if (n->needs_grad) {
    Node<S>* an = a.node().get();
    Node<S>* on = n.get();
    n->back = [an, on, rows, d, inv_std = std::move(inv_std)](
                  const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(an)) return;
      auto& ga = tp.gbuf(an);
      const S* xh = on->v.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* g = go.data() + r * d;
        const S* y = xh + r * d;
        double gmean = 0, gymean = 0;
        for (int64_t i = 0; i < d; ++i) {
          gmean += (double)g[i];
          gymean += (double)g[i] * (double)y[i];
        }
        gmean /= (double)d;
        gymean /= (double)d;
        const double inv = (double)inv_std[r];
        S* dst = ga.data() + r * d;
        for (int64_t i = 0; i < d; ++i)
          dst[i] += S(inv * ((double)g[i] - gmean - (double)y[i] * gymean));
      }
    };
  }
  return Tensor<S>(n);
}

// ---- spatial ----

// x{C,H,W} conv w{O,C,kh,kw} (odd kernels, stride 1, zero 'same' padding).
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw TensorError("conv2d", "expects x rank 3, w rank 4, b rank 1",
                      x.shape(), w.shape());
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C || b.dim(0) != O || kh % 2 == 0 || kw % 2 == 0)
    throw TensorError("conv2d", "incompatible shapes", x.shape(), w.shape());
  const int ph = kh / 2, pw = kw / 2;
  std::vector<S> out((size_t)O * H * W);
  const S* xv = x.value().data();
  const S* wv = w.value().data();
  const S* bv = b.value().data();
  for (int o = 0; o < O; ++o)
    std::fill(out.begin() + (size_t)o * H * W,
              out.begin() + (size_t)(o + 1) * H * W, bv[o]);
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const S wgt = wv[(((size_t)o * C + c) * kh + ky) * kw + kx];
          const int dy = ky - ph, dx = kx - pw;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int y = y0; y < y1; ++y) {
            const S* src = xv + ((size_t)c * H + y + dy) * W + dx;
            S* dst = out.data() + ((size_t)o * H + y) * W;
            for (int xi = x0; xi < x1; ++xi) dst[xi] += wgt * src[xi];
          }
        }
  auto n = detail::new_node<S>("conv2d", {O, H, W}, std::move(out),
                               {x.node(), w.node(), b.node()}, w.shape());
  if (n->needs_grad) {
    Node<S>* xn = x.node().get();
    Node<S>* wn = w.node().get();
    Node<S>* bn = b.node().get();
    n->back = [xn, wn, bn, C, H, W, O, kh, kw, ph, pw](
                  const std::vector<S>& go, Tape<S>& tp) {
      const S* xv2 = xn->v.data();
      const S* wv2 = wn->v.data();
      if (detail::wants_grad(bn)) {
        auto& gb = tp.gbuf(bn);
        for (int o = 0; o < O; ++o) {
          double acc = 0;
          const S* g = go.data() + (size_t)o * H * W;
          for (int i = 0; i < H * W; ++i) acc += (double)g[i];
          gb[o] += S(acc);
        }
      }
      const bool wx = detail::wants_grad(xn);
      const bool ww = detail::wants_grad(wn);
      if (!wx && !ww) return;
      S* gx = wx ? tp.gbuf(xn).data() : nullptr;
      S* gw = ww ? tp.gbuf(wn).data() : nullptr;
      for (int o = 0; o < O; ++o)
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const size_t wix = (((size_t)o * C + c) * kh + ky) * kw + kx;
              const S wgt = wv2[wix];
              const int dy = ky - ph, dx = kx - pw;
              const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              double wacc = 0;
              for (int y = y0; y < y1; ++y) {
                const S* g = go.data() + ((size_t)o * H + y) * W;
                const size_t src_off = ((size_t)c * H + y + dy) * W + dx;
                if (gx) {
                  S* dst = gx + src_off;
                  for (int xi = x0; xi < x1; ++xi) dst[xi] += wgt * g[xi];
                }
                if (gw) {
                  const S* src = xv2 + src_off;
                  for (int xi = x0; xi < x1; ++xi)
                    wacc += (double)src[xi] * (double)g[xi];
                }
              }
              if (gw) gw[wix] += S(wacc);
            }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> upsample_nearest2d(const Tensor<S>& x, int factor) {
  if (x.rank() != 3 || factor < 1)
    throw TensorError("upsample_nearest2d", "expects rank 3, factor >= 1",
                      x.shape());
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = H * factor, Wo = W * factor;
  std::vector<S> out((size_t)C * Ho * Wo);
  const S* xv = x.value().data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int xi = 0; xi < Wo; ++xi)
        out[((size_t)c * Ho + y) * Wo + xi] =
            xv[((size_t)c * H + y / factor) * W + xi / factor];
  auto n = detail::new_node<S>("upsample_nearest2d", {C, Ho, Wo},
                               std::move(out), {x.node()});
  if (n->needs_grad) {
    Node<S>* xn = x.node().get();
    n->back = [xn, C, H, W, Ho, Wo, factor](const std::vector<S>& go,
                                            Tape<S>& tp) {
      if (!detail::wants_grad(xn)) return;
      auto& ga = tp.gbuf(xn);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y)
          for (int xi = 0; xi < Wo; ++xi)
            ga[((size_t)c * H + y / factor) * W + xi / factor] +=
                go[((size_t)c * Ho + y) * Wo + xi];
    };
  }
  return Tensor<S>(n);
}

// ---- lookup / selection ----

template <class S>
Tensor<S> embed_rows(const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw TensorError("embed_rows", "table must be rank 2", table.shape());
  const int V = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw TensorError("embed_rows", "id out of range", table.shape());
  std::vector<S> out((size_t)ids.size() * d);
  const S* tv = table.value().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(tv + (size_t)ids[i] * d, tv + (size_t)(ids[i] + 1) * d,
              out.begin() + i * d);
  auto n = detail::new_node<S>("embed_rows", {(int)ids.size(), d},
                               std::move(out), {table.node()});
  if (n->needs_grad) {
    Node<S>* tn = table.node().get();
    n->back = [tn, ids, d](const std::vector<S>& go, Tape<S>& tp) {
      if (!detail::wants_grad(tn)) return;
      auto& ga = tp.gbuf(tn);
      for (size_t i = 0; i < ids.size(); ++i) {
        const S* src = go.data() + i * d;
        S* dst = ga.data() + (size_t)ids[i] * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor<S>(n);
}

// Stops gradient flow; shares no graph linkage with the source.
template <class S>
Tensor<S> detach(const Tensor<S>& a) {
  auto n = std::make_shared<Node<S>>();
  n->shape = a.shape();
  n->v = a.value();
  return Tensor<S>(n);
}

// Per-row top-k column indices of a {N,E} tensor, ties broken toward the
// lowest index. Returns row-major N*k indices, descending value per row.
template <class S>
std::vector<int> top_k_rows(const Tensor<S>& a, int k) {
  if (a.rank() != 2 || k < 1 || k > a.dim(1))
    throw TensorError("top_k_rows", "bad rank or k", a.shape());
  const int N = a.dim(0), E = a.dim(1);
  std::vector<int> out((size_t)N * k);
  const S* av = a.value().data();
  std::vector<int> idx(E);
  for (int r = 0; r < N; ++r) {
    const S* row = av + (size_t)r * E;
    for (int e = 0; e < E; ++e) idx[e] = e;
    std::stable_sort(idx.begin(), idx.end(), [row](int i, int j) {
      if (row[i] != row[j]) return row[i] > row[j];
      return i < j;
    });
    std::copy(idx.begin(), idx.begin() + k, out.begin() + (size_t)r * k);
  }
  return out;
}

}  // namespace care
