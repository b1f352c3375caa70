#pragma once

// Dense tensors with reverse-mode gradients. Values are stored row-major;
// every op records a backward closure on a tape held by the output node.
// Instantiated with float for training and double for gradient checks.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sslkit::nd {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline thread_local int g_no_grad_depth = 0;
inline thread_local bool g_check_finite = false;

struct NoGradGuard {
  NoGradGuard() { ++g_no_grad_depth; }
  ~NoGradGuard() { --g_no_grad_depth; }
};
struct FiniteCheckGuard {
  explicit FiniteCheckGuard(bool on = true) : prev_(g_check_finite) { g_check_finite = on; }
  ~FiniteCheckGuard() { g_check_finite = prev_; }

 private:
  bool prev_;
};

inline bool grad_enabled() { return g_no_grad_depth == 0; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backfn;  // consumes this->grad
  const char* op = "leaf";
};

template <class T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node<T>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, T(0));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, v);
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw TensorError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return numel(node_->shape); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool is_leaf() const { return node_->leaf; }

  const std::vector<T>* grad() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
  }
  std::vector<T>& grad_ref() {
    if (node_->grad.empty()) node_->grad.assign(static_cast<size_t>(size()), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  T item() const {
    if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  static Tensor from_data(Shape shape, std::vector<T>, bool requires_grad, T fill) {
    Tensor t;
    const int64_t n = numel(shape);
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(n), fill);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
void accum(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
std::vector<T>& parent_grad(const std::shared_ptr<Node<T>>& p) {
  if (p->grad.empty()) p->grad.assign(p->value.size(), T(0));
  return p->grad;
}

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
  if (!g_check_finite) return;
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw TensorError(std::string("non-finite value produced by op '") + op + "'");
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<EMat<T>>;
template <class T>
using CMapM = Eigen::Map<const EMat<T>>;

}  // namespace detail

// Builds the output node. When gradients are off (globally, or because no
// parent requires them) the result is a plain constant and backfn is dropped.
template <class T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backfn) {
  detail::check_finite(op, value);
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.leaf = false;
    n.op = op;
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backfn = std::move(backfn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward

template <class T>
void backward(Tensor<T> loss) {
  if (loss.size() != 1)
    throw TensorError("backward() requires a scalar loss, got shape " +
                      shape_str(loss.shape()));
  using NodeT = Node<T>;
  std::vector<NodeT*> topo;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      NodeT* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads are scratch space for this pass; leaf grads accumulate.
  for (NodeT* n : topo)
    if (!n->leaf) n->grad.clear();
  loss.node()->grad.assign(1, T(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    NodeT* n = *it;
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
}

// ---------------------------------------------------------------------------
// broadcasting helpers (numpy rules, right-aligned)

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw TensorError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                        shape_str(b) + " do not broadcast");
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// strides of `s` expanded to broadcast rank r (0 where broadcast)
inline std::vector<int64_t> bcast_strides(const Shape& s, size_t r) {
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    const size_t ax = s.size() - 1 - i;
    st[r - 1 - i] = (s[ax] == 1) ? 0 : acc;
    acc *= s[ax];
  }
  return st;
}

template <class T, class F>
void bcast_apply(const Shape& out, const Shape& sa, const Shape& sb,
                 const std::vector<T>& a, const std::vector<T>& b, F&& f) {
  const size_t r = out.size();
  const auto sta = bcast_strides(sa, r);
  const auto stb = bcast_strides(sb, r);
  std::vector<int64_t> idx(r, 0);
  const int64_t n = numel(out);
  int64_t ia = 0, ib = 0;
  for (int64_t k = 0; k < n; ++k) {
    f(k, ia, ib);
    for (size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sta[d];
        ib += stb[d];
        break;
      }
      idx[d] = 0;
      ia -= sta[d] * (out[d] - 1);
      ib -= stb[d] * (out[d] - 1);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

template <class T, class FwdF, class DaF, class DbF>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b,
                    FwdF fwd, DaF dfa, DbF dfb) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::vector<T> out;
  Shape os;
  const bool same = sa == sb;
  if (same) {
    os = sa;
    out.resize(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i], b.data()[i]);
  } else {
    os = detail::broadcast_shape(op, sa, sb);
    out.resize(static_cast<size_t>(numel(os)));
    detail::bcast_apply<T>(os, sa, sb, a.data(), b.data(),
                           [&](int64_t k, int64_t ia, int64_t ib) {
                             out[static_cast<size_t>(k)] =
                                 fwd(a.data()[static_cast<size_t>(ia)],
                                     b.data()[static_cast<size_t>(ib)]);
                           });
  }
  auto an = a.node();
  auto bn = b.node();
  Shape osc = os;
  return make_op<T>(op, std::move(os), std::move(out), {a, b},
                    [an, bn, osc, same, dfa, dfb](Node<T>& o) {
                      auto apply = [&](auto&& put) {
                        if (same) {
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            put(static_cast<int64_t>(i), static_cast<int64_t>(i),
                                static_cast<int64_t>(i));
                        } else {
                          detail::bcast_apply<T>(osc, an->shape, bn->shape, an->value,
                                                 bn->value, put);
                        }
                      };
                      if (an->requires_grad) {
                        auto& ga = detail::parent_grad(an);
                        apply([&](int64_t k, int64_t ia, int64_t ib) {
                          ga[static_cast<size_t>(ia)] +=
                              o.grad[static_cast<size_t>(k)] *
                              dfa(an->value[static_cast<size_t>(ia)],
                                  bn->value[static_cast<size_t>(ib)]);
                        });
                      }
                      if (bn->requires_grad) {
                        auto& gb = detail::parent_grad(bn);
                        apply([&](int64_t k, int64_t ia, int64_t ib) {
                          gb[static_cast<size_t>(ib)] +=
                              o.grad[static_cast<size_t>(k)] *
                              dfb(an->value[static_cast<size_t>(ia)],
                                  bn->value[static_cast<size_t>(ib)]);
                        });
                      }
                    });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// elementwise unary ops

template <class T, class FwdF, class DF>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, FwdF fwd, DF df) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto an = a.node();
  return make_op<T>(op, a.shape(), std::move(out), {a}, [an, df](Node<T>& o) {
    auto& g = detail::parent_grad(an);
    for (size_t i = 0; i < g.size(); ++i)
      g[i] += o.grad[i] * df(an->value[i], o.value[i]);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> pow(const Tensor<T>& a, T p) {
  return unary_op<T>(
      "pow", a, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return p * std::pow(x, p - T(1)); });
}
template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return unary_op<T>(
      "scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape / concat / slice

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  detail::CMapM<T> A(a.data().data(), m, k), B(b.data().data(), k, n);
  detail::MapM<T>(out.data(), m, n).noalias() = A * B;
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                    [an, bn, m, k, n](Node<T>& o) {
                      detail::CMapM<T> G(o.grad.data(), m, n);
                      detail::CMapM<T> A(an->value.data(), m, k);
                      detail::CMapM<T> B(bn->value.data(), k, n);
                      if (an->requires_grad)
                        detail::MapM<T>(detail::parent_grad(an).data(), m, k).noalias() +=
                            G * B.transpose();
                      if (bn->requires_grad)
                        detail::MapM<T>(detail::parent_grad(bn).data(), k, n).noalias() +=
                            A.transpose() * G;
                    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw TensorError("transpose: expected rank-2 tensor");
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.data().size());
  detail::MapM<T>(out.data(), n, m) = detail::CMapM<T>(a.data().data(), m, n).transpose();
  auto an = a.node();
  return make_op<T>("transpose", {n, m}, std::move(out), {a}, [an, m, n](Node<T>& o) {
    detail::MapM<T>(detail::parent_grad(an).data(), m, n) +=
        detail::CMapM<T>(o.grad.data(), n, m).transpose();
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  // one -1 wildcard allowed
  int64_t known = 1, wild = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      wild = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (wild >= 0) shape[static_cast<size_t>(wild)] = a.size() / known;
  if (numel(shape) != a.size())
    throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  auto an = a.node();
  return make_op<T>("reshape", std::move(shape), a.data(), {a}, [an](Node<T>& o) {
    detail::accum(detail::parent_grad(an), o.grad);
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  Shape os = parts[0].shape();
  const size_t ax = static_cast<size_t>(axis);
  int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    s[ax] = os[ax];
    if (s != os) throw TensorError("concat: shape mismatch at " + shape_str(p.shape()));
    total += p.dim(axis);
  }
  os[ax] = total;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= os[i];
  for (size_t i = ax + 1; i < os.size(); ++i) inner *= os[i];
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const int64_t row = total * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t pr = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * pr, pr, out.data() + o * row + off);
    off += pr;
  }
  std::vector<std::shared_ptr<Node<T>>> pnodes;
  for (const auto& p : parts) pnodes.push_back(p.node());
  return make_op<T>("concat", std::move(os), std::move(out), parts,
                    [pnodes, outer, inner, row, axis](Node<T>& o) {
                      int64_t off = 0;
                      for (const auto& pn : pnodes) {
                        const int64_t pr =
                            pn->shape[static_cast<size_t>(axis)] * inner;
                        if (pn->requires_grad) {
                          auto& g = detail::parent_grad(pn);
                          for (int64_t r = 0; r < outer; ++r)
                            for (int64_t i = 0; i < pr; ++i)
                              g[static_cast<size_t>(r * pr + i)] +=
                                  o.grad[static_cast<size_t>(r * row + off + i)];
                        }
                        off += pr;
                      }
                    });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  const size_t ax = static_cast<size_t>(axis);
  if (ax >= a.shape().size() || start < 0 || start + len > a.dim(axis))
    throw TensorError("slice: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of bounds for " +
                      shape_str(a.shape()));
  Shape os = a.shape();
  os[ax] = len;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (size_t i = ax + 1; i < a.shape().size(); ++i) inner *= a.shape()[i];
  const int64_t arow = a.dim(axis) * inner, orow = len * inner;
  std::vector<T> out(static_cast<size_t>(numel(os)));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + o * arow + start * inner, orow,
                out.data() + o * orow);
  auto an = a.node();
  return make_op<T>("slice", std::move(os), std::move(out), {a},
                    [an, outer, inner, arow, orow, start](Node<T>& o) {
                      auto& g = detail::parent_grad(an);
                      for (int64_t r = 0; r < outer; ++r)
                        for (int64_t i = 0; i < orow; ++i)
                          g[static_cast<size_t>(r * arow + start * inner + i)] +=
                              o.grad[static_cast<size_t>(r * orow + i)];
                    });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {
inline void axis_sizes(const Shape& s, int axis, int64_t& outer, int64_t& mid,
                       int64_t& inner) {
  const size_t ax = static_cast<size_t>(axis);
  outer = mid = inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= s[i];
  mid = s[ax];
  for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto an = a.node();
  return make_op<T>("sum", {}, {acc}, {a}, [an](Node<T>& o) {
    auto& g = detail::parent_grad(an);
    for (auto& v : g) v += o.grad[0];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = false) {
  int64_t outer, mid, inner;
  detail::axis_sizes(a.shape(), axis, outer, mid, inner);
  Shape os = a.shape();
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      for (int64_t i = 0; i < inner; ++i)
        out[static_cast<size_t>(o * inner + i)] +=
            a.data()[static_cast<size_t>((o * mid + m) * inner + i)];
  auto an = a.node();
  return make_op<T>("sum_axis", std::move(os), std::move(out), {a},
                    [an, outer, mid, inner](Node<T>& o) {
                      auto& g = detail::parent_grad(an);
                      for (int64_t r = 0; r < outer; ++r)
                        for (int64_t m = 0; m < mid; ++m)
                          for (int64_t i = 0; i < inner; ++i)
                            g[static_cast<size_t>((r * mid + m) * inner + i)] +=
                                o.grad[static_cast<size_t>(r * inner + i)];
                    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}
template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = false) {
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// softmax

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  int64_t outer, mid, inner;
  detail::axis_sizes(a.shape(), axis, outer, mid, inner);
  std::vector<T> out(a.data().size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t m = 0; m < mid; ++m)
        mx = std::max(mx, a.data()[static_cast<size_t>((o * mid + m) * inner + i)]);
      T z = 0;
      for (int64_t m = 0; m < mid; ++m) {
        const size_t idx = static_cast<size_t>((o * mid + m) * inner + i);
        out[idx] = std::exp(a.data()[idx] - mx);
        z += out[idx];
      }
      for (int64_t m = 0; m < mid; ++m)
        out[static_cast<size_t>((o * mid + m) * inner + i)] /= z;
    }
  auto an = a.node();
  return make_op<T>("softmax", a.shape(), std::move(out), {a},
                    [an, outer, mid, inner](Node<T>& o) {
                      auto& g = detail::parent_grad(an);
                      for (int64_t r = 0; r < outer; ++r)
                        for (int64_t i = 0; i < inner; ++i) {
                          T dot = 0;
                          for (int64_t m = 0; m < mid; ++m) {
                            const size_t idx =
                                static_cast<size_t>((r * mid + m) * inner + i);
                            dot += o.grad[idx] * o.value[idx];
                          }
                          for (int64_t m = 0; m < mid; ++m) {
                            const size_t idx =
                                static_cast<size_t>((r * mid + m) * inner + i);
                            g[idx] += o.value[idx] * (o.grad[idx] - dot);
                          }
                        }
                    });
}

// Row maxima as a detached constant; numerical anchor for logsumexp.
template <class T>
Tensor<T> max_detached(const Tensor<T>& a, int axis, bool keepdim = true) {
  int64_t outer, mid, inner;
  detail::axis_sizes(a.shape(), axis, outer, mid, inner);
  Shape os = a.shape();
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  std::vector<T> out(static_cast<size_t>(outer * inner),
                     -std::numeric_limits<T>::infinity());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      for (int64_t i = 0; i < inner; ++i)
        out[static_cast<size_t>(o * inner + i)] =
            std::max(out[static_cast<size_t>(o * inner + i)],
                     a.data()[static_cast<size_t>((o * mid + m) * inner + i)]);
  return Tensor<T>::from(std::move(os), std::move(out));
}

template <class T>
Tensor<T> logsumexp(const Tensor<T>& a, int axis, bool keepdim = false) {
  Tensor<T> mx = max_detached(a, axis, true);
  Tensor<T> s = log(sum(exp(sub(a, mx)), axis, true));
  Tensor<T> r = add(s, mx);
  if (!keepdim) {
    Shape os = r.shape();
    os.erase(os.begin() + axis);
    r = reshape(r, os);
  }
  return r;
}

// ---------------------------------------------------------------------------
// normalization helpers

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& a, int axis, T eps = T(1e-8)) {
  Tensor<T> n = sqrt(sum(mul(a, a), axis, true));
  return div(a, add_scalar(n, eps));
}

// per-dimension mean over axis 0 of a [B,d] tensor
template <class T>
Tensor<T> batch_mean(const Tensor<T>& a) {
  return mean(a, 0, true);
}

// per-dimension std over axis 0 (biased, 1/B), eps-guarded
template <class T>
Tensor<T> batch_std(const Tensor<T>& a, T eps = T(1e-5)) {
  Tensor<T> c = sub(a, batch_mean(a));
  return sqrt(add_scalar(mean(mul(c, c), 0, true), eps));
}

// ---------------------------------------------------------------------------
// batch norm (2D over batch, 4D per channel), fused backward

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto& s = x.shape();
  int64_t C, N, inner;  // C channels, N reduction count per channel
  if (s.size() == 2) {
    C = s[1];
    N = s[0];
    inner = 1;
  } else if (s.size() == 4) {
    C = s[1];
    N = s[0] * s[2] * s[3];
    inner = s[2] * s[3];
  } else {
    throw TensorError("batch_norm: expected rank 2 or 4, got " + shape_str(s));
  }
  if (gamma.size() != C || beta.size() != C)
    throw TensorError("batch_norm: affine parameters must have " + std::to_string(C) +
                      " elements");
  const int64_t B = s[0];
  auto at = [C, inner](int64_t b, int64_t c, int64_t i) {
    return static_cast<size_t>((b * C + c) * inner + i);
  };
  std::vector<T> mu(static_cast<size_t>(C), T(0)), ivar(static_cast<size_t>(C)),
      xhat(x.data().size()), out(x.data().size());
  for (int64_t c = 0; c < C; ++c) {
    T m = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < inner; ++i) m += x.data()[at(b, c, i)];
    m /= static_cast<T>(N);
    T v = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < inner; ++i) {
        const T d = x.data()[at(b, c, i)] - m;
        v += d * d;
      }
    v /= static_cast<T>(N);
    mu[static_cast<size_t>(c)] = m;
    ivar[static_cast<size_t>(c)] = T(1) / std::sqrt(v + eps);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < inner; ++i) {
        const size_t idx = at(b, c, i);
        xhat[idx] = (x.data()[idx] - m) * ivar[static_cast<size_t>(c)];
        out[idx] = gamma.data()[static_cast<size_t>(c)] * xhat[idx] +
                   beta.data()[static_cast<size_t>(c)];
      }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
  auto iv = std::make_shared<std::vector<T>>(std::move(ivar));
  return make_op<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xh, iv, B, C, inner, N, at](Node<T>& o) {
        for (int64_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xh = 0;
          for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < inner; ++i) {
              const size_t idx = at(b, c, i);
              sum_dy += o.grad[idx];
              sum_dy_xh += o.grad[idx] * (*xh)[idx];
            }
          if (gn->requires_grad)
            detail::parent_grad(gn)[static_cast<size_t>(c)] += sum_dy_xh;
          if (bn->requires_grad)
            detail::parent_grad(bn)[static_cast<size_t>(c)] += sum_dy;
          if (xn->requires_grad) {
            auto& gx = detail::parent_grad(xn);
            const T g = gn->value[static_cast<size_t>(c)];
            const T k = g * (*iv)[static_cast<size_t>(c)] / static_cast<T>(N);
            for (int64_t b = 0; b < B; ++b)
              for (int64_t i = 0; i < inner; ++i) {
                const size_t idx = at(b, c, i);
                gx[idx] += k * (static_cast<T>(N) * o.grad[idx] - sum_dy -
                                (*xh)[idx] * sum_dy_xh);
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernel, zero padding 1, stride 1 or 2; im2col + GEMM

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw TensorError("conv2d: expected x[B,C,H,W], w[K,C,3,3]");
  if (x.dim(1) != w.dim(1))
    throw TensorError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                      shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw TensorError("conv2d: stride must be 1 or 2");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = w.dim(0);
  const int64_t OH = (H + 2 - 3) / stride + 1, OW = (W + 2 - 3) / stride + 1;
  const int64_t CK = C * 9, P = B * OH * OW;

  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(CK * P), T(0));
  // col[(c*9 + ky*3 + kx), b*OH*OW + oy*OW + ox] = x[b,c,oy*s+ky-1,ox*s+kx-1]
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* xp = x.data().data() + (b * C + c) * H * W;
      for (int64_t ky = 0; ky < 3; ++ky)
        for (int64_t kx = 0; kx < 3; ++kx) {
          T* cp = col->data() + (c * 9 + ky * 3 + kx) * P + b * OH * OW;
          for (int64_t oy = 0; oy < OH; ++oy) {
            const int64_t iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= H) continue;
            for (int64_t ox = 0; ox < OW; ++ox) {
              const int64_t ix = ox * stride + kx - 1;
              if (ix < 0 || ix >= W) continue;
              cp[oy * OW + ox] = xp[iy * W + ix];
            }
          }
        }
    }

  std::vector<T> out(static_cast<size_t>(K * P));
  {
    detail::CMapM<T> Wm(w.data().data(), K, CK);
    detail::CMapM<T> Cm(col->data(), CK, P);
    detail::MapM<T>(out.data(), K, P).noalias() = Wm * Cm;
  }
  // out is [K, B*OH*OW]; reorder to [B,K,OH,OW]
  std::vector<T> y(static_cast<size_t>(B * K * OH * OW));
  for (int64_t k = 0; k < K; ++k)
    for (int64_t b = 0; b < B; ++b)
      std::copy_n(out.data() + k * P + b * OH * OW, OH * OW,
                  y.data() + (b * K + k) * OH * OW);

  auto xn = x.node();
  auto wn = w.node();
  return make_op<T>(
      "conv2d", {B, K, OH, OW}, std::move(y), {x, w},
      [xn, wn, col, B, C, H, W, K, OH, OW, CK, P, stride](Node<T>& o) {
        // regroup grad to [K, P]
        std::vector<T> go(static_cast<size_t>(K * P));
        for (int64_t k = 0; k < K; ++k)
          for (int64_t b = 0; b < B; ++b)
            std::copy_n(o.grad.data() + (b * K + k) * OH * OW, OH * OW,
                        go.data() + k * P + b * OH * OW);
        detail::CMapM<T> G(go.data(), K, P);
        if (wn->requires_grad) {
          detail::CMapM<T> Cm(col->data(), CK, P);
          detail::MapM<T>(detail::parent_grad(wn).data(), K, CK).noalias() +=
              G * Cm.transpose();
        }
        if (xn->requires_grad) {
          std::vector<T> gcol(static_cast<size_t>(CK * P));
          detail::CMapM<T> Wm(wn->value.data(), K, CK);
          detail::MapM<T>(gcol.data(), CK, P).noalias() = Wm.transpose() * G;
          auto& gx = detail::parent_grad(xn);
          for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
              T* xp = gx.data() + (b * C + c) * H * W;
              for (int64_t ky = 0; ky < 3; ++ky)
                for (int64_t kx = 0; kx < 3; ++kx) {
                  const T* cp = gcol.data() + (c * 9 + ky * 3 + kx) * P + b * OH * OW;
                  for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                      const int64_t ix = ox * stride + kx - 1;
                      if (ix < 0 || ix >= W) continue;
                      xp[iy * W + ix] += cp[oy * OW + ox];
                    }
                  }
                }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// cholesky / triangular solve (differentiable, for whitening)

template <class T>
Tensor<T> cholesky(const Tensor<T>& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1))
    throw TensorError("cholesky: expected square matrix, got " + shape_str(a.shape()));
  const int64_t d = a.dim(0);
  std::vector<T> L(static_cast<size_t>(d * d), T(0));
  const auto& A = a.data();
  T min_pivot = std::numeric_limits<T>::infinity();
  for (int64_t j = 0; j < d; ++j) {
    T diag = A[static_cast<size_t>(j * d + j)];
    for (int64_t k = 0; k < j; ++k)
      diag -= L[static_cast<size_t>(j * d + k)] * L[static_cast<size_t>(j * d + k)];
    min_pivot = std::min(min_pivot, diag);
    if (diag <= T(0))
      throw TensorError("cholesky: matrix not positive definite (smallest pivot " +
                        std::to_string(static_cast<double>(min_pivot)) + ")");
    const T ljj = std::sqrt(diag);
    L[static_cast<size_t>(j * d + j)] = ljj;
    for (int64_t i = j + 1; i < d; ++i) {
      T s = A[static_cast<size_t>(i * d + j)];
      for (int64_t k = 0; k < j; ++k)
        s -= L[static_cast<size_t>(i * d + k)] * L[static_cast<size_t>(j * d + k)];
      L[static_cast<size_t>(i * d + j)] = s / ljj;
    }
  }
  auto an = a.node();
  auto Lv = std::make_shared<std::vector<T>>(L);
  return make_op<T>("cholesky", {d, d}, std::move(L), {a}, [an, Lv, d](Node<T>& o) {
    // Murray (2016): Abar = 0.5 * L^-T (Phi(L^T Lbar) + Phi(L^T Lbar)^T') L^-1,
    // with Phi taking the lower triangle and halving the diagonal.
    const auto& L = *Lv;
    std::vector<T> P(static_cast<size_t>(d * d), T(0));
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j <= i; ++j) {
        T s = 0;
        for (int64_t k = i; k < d; ++k)
          s += L[static_cast<size_t>(k * d + i)] * o.grad[static_cast<size_t>(k * d + j)];
        P[static_cast<size_t>(i * d + j)] = (i == j) ? s / T(2) : s;
      }
    // S = L^-T P L^-1 via two triangular solves: first X solves L^T X = P,
    // then S^T solves L^T (S^T) = X^T  (i.e. S = X L^-1).
    auto solve_lt = [&](std::vector<T>& M) {  // solve L^T Y = M in place, col by col
      for (int64_t c = 0; c < d; ++c)
        for (int64_t i = d - 1; i >= 0; --i) {
          T s = M[static_cast<size_t>(i * d + c)];
          for (int64_t k = i + 1; k < d; ++k)
            s -= L[static_cast<size_t>(k * d + i)] * M[static_cast<size_t>(k * d + c)];
          M[static_cast<size_t>(i * d + c)] = s / L[static_cast<size_t>(i * d + i)];
        }
    };
    solve_lt(P);  // P <- L^-T P
    // transpose, solve again, transpose back: S = L^-T P L^-1
    std::vector<T> Pt(static_cast<size_t>(d * d));
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j)
        Pt[static_cast<size_t>(j * d + i)] = P[static_cast<size_t>(i * d + j)];
    solve_lt(Pt);
    auto& ga = detail::parent_grad(an);
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j)
        ga[static_cast<size_t>(i * d + j)] +=
            (Pt[static_cast<size_t>(j * d + i)] + Pt[static_cast<size_t>(i * d + j)]) /
            T(2);
  });
}

// Solves L X = B for lower-triangular L; B is [d, n].
template <class T>
Tensor<T> triangular_solve(const Tensor<T>& l, const Tensor<T>& b) {
  if (l.ndim() != 2 || l.dim(0) != l.dim(1) || b.ndim() != 2 || b.dim(0) != l.dim(0))
    throw TensorError("triangular_solve: shapes " + shape_str(l.shape()) + ", " +
                      shape_str(b.shape()));
  const int64_t d = l.dim(0), n = b.dim(1);
  std::vector<T> X = b.data();
  const auto& L = l.data();
  for (int64_t c = 0; c < n; ++c)
    for (int64_t i = 0; i < d; ++i) {
      T s = X[static_cast<size_t>(i * n + c)];
      for (int64_t k = 0; k < i; ++k)
        s -= L[static_cast<size_t>(i * d + k)] * X[static_cast<size_t>(k * n + c)];
      X[static_cast<size_t>(i * n + c)] = s / L[static_cast<size_t>(i * d + i)];
    }
  auto ln = l.node();
  auto bn = b.node();
  auto Xv = std::make_shared<std::vector<T>>(X);
  return make_op<T>("triangular_solve", {d, n}, std::move(X), {l, b},
                    [ln, bn, Xv, d, n](Node<T>& o) {
                      const auto& L = ln->value;
                      // Bbar = L^-T Xbar
                      std::vector<T> Bb = o.grad;
                      for (int64_t c = 0; c < n; ++c)
                        for (int64_t i = d - 1; i >= 0; --i) {
                          T s = Bb[static_cast<size_t>(i * n + c)];
                          for (int64_t k = i + 1; k < d; ++k)
                            s -= L[static_cast<size_t>(k * d + i)] *
                                 Bb[static_cast<size_t>(k * n + c)];
                          Bb[static_cast<size_t>(i * n + c)] =
                              s / L[static_cast<size_t>(i * d + i)];
                        }
                      if (bn->requires_grad) detail::accum(detail::parent_grad(bn), Bb);
                      if (ln->requires_grad) {
                        // Lbar = -tril(Bbar X^T)
                        auto& gl = detail::parent_grad(ln);
                        for (int64_t i = 0; i < d; ++i)
                          for (int64_t j = 0; j <= i; ++j) {
                            T s = 0;
                            for (int64_t c = 0; c < n; ++c)
                              s += Bb[static_cast<size_t>(i * n + c)] *
                                   (*Xv)[static_cast<size_t>(j * n + c)];
                            gl[static_cast<size_t>(i * d + j)] -= s;
                          }
                      }
                    });
}

// ---------------------------------------------------------------------------
// gradient checking

// max over elements of |analytic - numeric| / max(1, |numeric|),
// with central differences of step h.
template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
             T h = T(1e-5)) {
  FiniteCheckGuard finite_on;
  Tensor<T> xg = Tensor<T>::from(x.shape(), x.data(), /*requires_grad=*/true);
  Tensor<T> loss = f(xg);
  if (loss.size() != 1) throw TensorError("grad_check: f must be scalar-valued");
  backward(loss);
  const std::vector<T>* g = xg.grad();
  std::vector<T> analytic =
      g ? *g : std::vector<T>(static_cast<size_t>(x.size()), T(0));
  T worst = 0;
  std::vector<T> probe = x.data();
  for (size_t i = 0; i < probe.size(); ++i) {
    const T keep = probe[i];
    probe[i] = keep + h;
    const T up = f(Tensor<T>::from(x.shape(), probe)).item();
    probe[i] = keep - h;
    const T dn = f(Tensor<T>::from(x.shape(), probe)).item();
    probe[i] = keep;
    const T numeric = (up - dn) / (T(2) * h);
    const T rel = std::abs(analytic[i] - numeric) /
                  std::max(T(1), std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace sslkit::nd
