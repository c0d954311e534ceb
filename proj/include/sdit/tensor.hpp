#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sdit/errors.hpp"
#include "sdit/rng.hpp"

namespace sdit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
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

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // non-empty iff requires_grad
  bool requires_grad = false;
  const void* tape_tag = nullptr;  // tape that produced this node, if any
};

template <class T>
inline thread_local Tape<T>* g_active_tape = nullptr;

}  // namespace detail

// Dense row-major tensor with shared-node value semantics: copies alias the
// same storage. Values are immutable once an op has produced them; only grad
// buffers (and leaf values, between tapes, by the optimizer) get mutated.
template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(s);
    t.n_->value.assign(shape_numel(t.n_->shape), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size()))
      throw ShapeMismatch("from: " + shape_str(s) + " does not hold " +
                          std::to_string(v.size()) + " values");
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(s);
    t.n_->value = std::move(v);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  // Leaf with gradient participation (model parameters, gradcheck inputs).
  static Tensor param(Shape s, std::vector<T> v) {
    Tensor t = from(std::move(s), std::move(v));
    t.n_->requires_grad = true;
    t.n_->grad.assign(t.numel(), T(0));
    return t;
  }

  static Tensor randn(Shape s, Rng& rng, double scale, bool requires_grad) {
    std::vector<T> v(shape_numel(s));
    for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
    return requires_grad ? param(std::move(s), std::move(v))
                         : from(std::move(s), std::move(v));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
  int64_t dim(int64_t i) const {
    return n_->shape[i < 0 ? n_->shape.size() + i : i];
  }

  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }
  // grad is the one buffer backward closures mutate through captured copies.
  std::vector<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  T item() const {
    if (numel() != 1) throw NotScalar("item() on tensor " + shape_str(shape()));
    return n_->value[0];
  }

  void zero_grad() {
    if (requires_grad()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Execution-ordered record of primitive ops. Backward walks the records once,
// in reverse; grads of tape-produced nodes are cleared afterwards so leaf
// grads accumulate across backward calls and across tapes.
template <class T>
class Tape {
 public:
  void record(std::function<void()> back,
              std::vector<std::shared_ptr<detail::Node<T>>> outs) {
    records_.push_back(std::move(back));
    for (auto& o : outs) produced_.push_back(std::move(o));
  }

  size_t size() const { return records_.size(); }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw NotScalar("backward: loss must be a scalar");
    auto n = loss.node();
    if (!n->requires_grad || n->tape_tag != this)
      throw DisconnectedGraph("backward: loss is not connected to this tape");
    n->grad[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    for (auto& p : produced_)
      std::fill(p->grad.begin(), p->grad.end(), T(0));
  }

 private:
  std::vector<std::function<void()>> records_;
  std::vector<std::shared_ptr<detail::Node<T>>> produced_;
};

template <class T>
Tape<T>* active_tape() {
  return detail::g_active_tape<T>;
}

template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(detail::g_active_tape<T>) {
    detail::g_active_tape<T> = &t;
  }
  ~TapeScope() { detail::g_active_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suspends recording (forward-only evaluation).
template <class T>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(detail::g_active_tape<T>) {
    detail::g_active_tape<T> = nullptr;
  }
  ~NoTapeScope() { detail::g_active_tape<T> = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<Tensor<T>> ins) {
  for (const auto& t : ins)
    if (t.requires_grad()) return true;
  return false;
}

// Marks `outs` as tape-produced and records the backward closure, when a tape
// is active and some input participates in gradients.
template <class T>
void finish_op(std::initializer_list<Tensor<T>> ins,
               std::initializer_list<Tensor<T>> outs,
               std::function<void()> back) {
  Tape<T>* tp = g_active_tape<T>;
  if (!tp || !any_requires_grad(ins)) return;
  std::vector<std::shared_ptr<Node<T>>> onodes;
  for (const auto& o : outs) {
    o.node()->requires_grad = true;
    o.node()->grad.assign(o.numel(), T(0));
    o.node()->tape_tag = tp;
    onodes.push_back(o.node());
  }
  tp->record(std::move(back), std::move(onodes));
}

template <class T>
void ensure_all_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.value())
    if (!std::isfinite(static_cast<double>(v)))
      throw NonFinite(std::string(op) + ": non-finite input value");
}

// b broadcasts over a's leading dims iff b.shape is a suffix of a.shape.
template <class T>
int64_t suffix_broadcast_groups(const Tensor<T>& a, const Tensor<T>& b,
                                const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size())
    throw ShapeMismatch(std::string(op) + ": " + shape_str(sa) + " vs " +
                        shape_str(sb));
  size_t off = sa.size() - sb.size();
  for (size_t i = 0; i < sb.size(); ++i)
    if (sa[off + i] != sb[i])
      throw ShapeMismatch(std::string(op) + ": " + shape_str(sa) + " vs " +
                          shape_str(sb));
  return b.numel() == 0 ? 0 : a.numel() / b.numel();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, or second operand a suffix-broadcast).

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::suffix_broadcast_groups(a, b, "add");
  const int64_t bn = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + bv[i % bn];
  detail::finish_op<T>({a, b}, {out}, [a, b, out, bn]() {
    const auto& go = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i % bn] += go[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::suffix_broadcast_groups(a, b, "sub");
  const int64_t bn = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] - bv[i % bn];
  detail::finish_op<T>({a, b}, {out}, [a, b, out, bn]() {
    const auto& go = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i % bn] -= go[i];
    }
  });
  return out;
}

// Hadamard product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::suffix_broadcast_groups(a, b, "mul");
  const int64_t bn = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * bv[i % bn];
  detail::finish_op<T>({a, b}, {out}, [a, b, out, bn]() {
    const auto& go = out.grad();
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i % bn];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i % bn] += go[i] * av[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + c;
  detail::finish_op<T>({a}, {out}, [a, out]() {
    if (!a.requires_grad()) return;
    const auto& go = out.grad();
    auto& ga = a.grad();
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * c;
  detail::finish_op<T>({a}, {out}, [a, out, c]() {
    if (!a.requires_grad()) return;
    const auto& go = out.grad();
    auto& ga = a.grad();
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
  });
  return out;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = x.value()[i];
    if (v >= T(0)) {
      out.value()[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      out.value()[i] = e / (T(1) + e);
    }
  }
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    const auto& go = out.grad();
    const auto& s = out.value();
    auto& gx = x.grad();
    for (size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] * s[i] * (T(1) - s[i]);
  });
  return out;
}

// Raw exponential; overflow raises NonFinite (the WKV scan uses its own
// shifted exponentials and never hits this guard).
template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T e = std::exp(x.value()[i]);
    if (!std::isfinite(static_cast<double>(e)))
      throw NonFinite("exp: overflow");
    out.value()[i] = e;
  }
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    const auto& go = out.grad();
    const auto& e = out.value();
    auto& gx = x.grad();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * e[i];
  });
  return out;
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = x.value()[i];
    out.value()[i] = v > T(0) ? v + std::log1p(std::exp(-v))
                              : std::log1p(std::exp(v));
  }
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    const auto& go = out.grad();
    const auto& xv = x.value();
    auto& gx = x.grad();
    for (size_t i = 0; i < go.size(); ++i) {
      T v = xv[i];
      T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                      : std::exp(v) / (T(1) + std::exp(v));
      gx[i] += go[i] * s;
    }
  });
  return out;
}

// max(x,0)^2 with derivative 2*max(x,0).
template <class T>
Tensor<T> relu_squared(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T m = std::max(x.value()[i], T(0));
    out.value()[i] = m * m;
  }
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    const auto& go = out.grad();
    const auto& xv = x.value();
    auto& gx = x.grad();
    for (size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] * T(2) * std::max(xv[i], T(0));
  });
  return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return mul(x, sigmoid(x));
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.value()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    T g = out.grad()[0];
    auto& gx = x.grad();
    for (auto& v : gx) v += g;
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T acc = T(0);
  for (T v : x.value()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  detail::finish_op<T>({x}, {out}, [x, out, inv]() {
    if (!x.requires_grad()) return;
    T g = out.grad()[0] * inv;
    auto& gx = x.grad();
    for (auto& v : gx) v += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul: a [.., M, K] x b [K, P] -> [.., M, P], broadcasting over a's
// leading batch dims. b is strictly rank 2.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw ShapeMismatch("matmul: need a rank>=2 and b rank 2, got " +
                        shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t K = a.dim(-1);
  const int64_t M = a.dim(-2);
  if (b.dim(0) != K)
    throw ShapeMismatch("matmul: inner dims " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  detail::ensure_all_finite(a, "matmul");
  detail::ensure_all_finite(b, "matmul");
  const int64_t P = b.dim(1);
  const int64_t G = a.numel() / (M * K);
  Shape os(a.shape().begin(), a.shape().end() - 1);
  os.push_back(P);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* av = a.value().data();
  const T* bv = b.value().data();
  T* ov = out.value().data();
  for (int64_t g = 0; g < G; ++g) {
    const T* A = av + g * M * K;
    T* C = ov + g * M * P;
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t k = 0; k < K; ++k) {
        const T x = A[m * K + k];
        if (x == T(0)) continue;
        const T* Br = bv + k * P;
        T* Cr = C + m * P;
        for (int64_t p = 0; p < P; ++p) Cr[p] += x * Br[p];
      }
    }
  }
  detail::finish_op<T>({a, b}, {out}, [a, b, out, G, M, K, P]() {
    const T* go = out.grad().data();
    const T* av = a.value().data();
    const T* bv = b.value().data();
    if (a.requires_grad()) {
      T* ga = a.grad().data();
      for (int64_t g = 0; g < G; ++g) {
        const T* GO = go + g * M * P;
        T* GA = ga + g * M * K;
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            const T* Br = bv + k * P;
            const T* Gr = GO + m * P;
            T acc = T(0);
            for (int64_t p = 0; p < P; ++p) acc += Gr[p] * Br[p];
            GA[m * K + k] += acc;
          }
      }
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      for (int64_t g = 0; g < G; ++g) {
        const T* A = av + g * M * K;
        const T* GO = go + g * M * P;
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            const T x = A[m * K + k];
            if (x == T(0)) continue;
            const T* Gr = GO + m * P;
            T* GB = gb + k * P;
            for (int64_t p = 0; p < P; ++p) GB[p] += x * Gr[p];
          }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last dim, then affine.

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  const int64_t D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D)
    throw ShapeMismatch("layer_norm: affine params must have length " +
                        std::to_string(D));
  if (!(eps > T(0))) throw BadParam("layer_norm: eps must be > 0");
  const int64_t R = x.numel() / D;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  // Saved per row for backward: 1/sigma and the normalized row.
  auto inv_sigma = std::make_shared<std::vector<T>>(R);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  T* ov = out.value().data();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = xv + r * D;
    T mu = T(0);
    for (int64_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (int64_t j = 0; j < D; ++j) {
      T d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(D);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (int64_t j = 0; j < D; ++j) {
      T xh = (row[j] - mu) * is;
      (*xhat)[r * D + j] = xh;
      ov[r * D + j] = gv[j] * xh + bv[j];
    }
  }
  detail::finish_op<T>({x, gamma, beta}, {out},
                       [x, gamma, beta, out, inv_sigma, xhat, R, D]() {
    const T* go = out.grad().data();
    const T* gv = gamma.value().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (int64_t r = 0; r < R; ++r) {
        const T is = (*inv_sigma)[r];
        const T* xh = xhat->data() + r * D;
        const T* g = go + r * D;
        T m1 = T(0), m2 = T(0);
        for (int64_t j = 0; j < D; ++j) {
          T gg = g[j] * gv[j];
          m1 += gg;
          m2 += gg * xh[j];
        }
        m1 /= static_cast<T>(D);
        m2 /= static_cast<T>(D);
        for (int64_t j = 0; j < D; ++j)
          gx[r * D + j] += (g[j] * gv[j] - m1 - xh[j] * m2) * is;
      }
    }
    if (gamma.requires_grad()) {
      T* gg = gamma.grad().data();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < D; ++j)
          gg[j] += go[r * D + j] * (*xhat)[r * D + j];
    }
    if (beta.requires_grad()) {
      T* gb = beta.grad().data();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < D; ++j) gb[j] += go[r * D + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops.

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s0.size()))
    throw ShapeMismatch("concat: bad axis");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank())
      throw ShapeMismatch("concat: rank mismatch");
    for (int64_t d = 0; d < p.rank(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        throw ShapeMismatch("concat: " + shape_str(p.shape()) + " vs " +
                            shape_str(s0));
    axis_total += p.shape()[axis];
  }
  Shape os = s0;
  os[axis] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Tensor<T> out = Tensor<T>::zeros(os);
  T* ov = out.value().data();
  const int64_t out_stride = axis_total * inner;
  std::vector<int64_t> lens;  // per-part slab length within one outer group
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t len = p.shape()[axis] * inner;
    lens.push_back(len);
    const T* pv = p.value().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pv + o * len, pv + (o + 1) * len, ov + o * out_stride + off);
    off += len;
  }
  Tape<T>* tp = active_tape<T>();
  bool need = false;
  for (const auto& p : parts) need = need || p.requires_grad();
  if (tp && need) {
    out.node()->requires_grad = true;
    out.node()->grad.assign(out.numel(), T(0));
    out.node()->tape_tag = tp;
    auto parts_copy = parts;
    tp->record(
        [parts_copy, out, lens, outer, out_stride]() {
          const T* go = out.grad().data();
          int64_t off = 0;
          for (size_t pi = 0; pi < parts_copy.size(); ++pi) {
            const auto& p = parts_copy[pi];
            const int64_t len = lens[pi];
            if (p.requires_grad()) {
              T* gp = p.grad().data();
              for (int64_t o = 0; o < outer; ++o) {
                const T* src = go + o * out_stride + off;
                T* dst = gp + o * len;
                for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
              }
            }
            off += len;
          }
        },
        {out.node()});
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int64_t axis,
                             const std::vector<int64_t>& sizes) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    throw ShapeMismatch("split: bad axis");
  int64_t total = 0;
  for (int64_t z : sizes) total += z;
  if (total != s[axis])
    throw SplitSizeMismatch("split: sizes sum to " + std::to_string(total) +
                            ", axis has " + std::to_string(s[axis]));
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const int64_t in_stride = s[axis] * inner;
  std::vector<Tensor<T>> outs;
  const T* xv = x.value().data();
  int64_t off = 0;
  for (int64_t z : sizes) {
    Shape os = s;
    os[axis] = z;
    Tensor<T> o = Tensor<T>::zeros(os);
    T* ov = o.value().data();
    const int64_t len = z * inner;
    for (int64_t g = 0; g < outer; ++g)
      std::copy(xv + g * in_stride + off, xv + g * in_stride + off + len,
                ov + g * len);
    outs.push_back(o);
    off += len;
  }
  Tape<T>* tp = active_tape<T>();
  if (tp && x.requires_grad()) {
    std::vector<std::shared_ptr<detail::Node<T>>> onodes;
    for (auto& o : outs) {
      o.node()->requires_grad = true;
      o.node()->grad.assign(o.numel(), T(0));
      o.node()->tape_tag = tp;
      onodes.push_back(o.node());
    }
    auto outs_copy = outs;
    tp->record(
        [x, outs_copy, outer, inner, in_stride]() {
          T* gx = x.grad().data();
          int64_t off = 0;
          for (const auto& o : outs_copy) {
            const int64_t len = o.numel() / (outer == 0 ? 1 : outer);
            const T* go = o.grad().data();
            for (int64_t g = 0; g < outer; ++g) {
              T* dst = gx + g * in_stride + off;
              const T* src = go + g * len;
              for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
            }
            off += len;
          }
        },
        std::move(onodes));
  }
  return outs;
}

// Swap the last two dims.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeMismatch("transpose: rank must be >= 2");
  const int64_t A = x.dim(-2), B = x.dim(-1);
  Shape os = x.shape();
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  const int64_t G = x.numel() / (A * B);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* xv = x.value().data();
  T* ov = out.value().data();
  for (int64_t g = 0; g < G; ++g)
    for (int64_t i = 0; i < A; ++i)
      for (int64_t j = 0; j < B; ++j)
        ov[g * A * B + j * A + i] = xv[g * A * B + i * B + j];
  detail::finish_op<T>({x}, {out}, [x, out, G, A, B]() {
    if (!x.requires_grad()) return;
    const T* go = out.grad().data();
    T* gx = x.grad().data();
    for (int64_t g = 0; g < G; ++g)
      for (int64_t i = 0; i < A; ++i)
        for (int64_t j = 0; j < B; ++j)
          gx[g * A * B + i * B + j] += go[g * A * B + j * A + i];
  });
  return out;
}

// Contiguous reinterpret; numel must match.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " +
                        shape_str(s));
  Tensor<T> out = Tensor<T>::from(std::move(s), x.value());
  detail::finish_op<T>({x}, {out}, [x, out]() {
    if (!x.requires_grad()) return;
    const auto& go = out.grad();
    auto& gx = x.grad();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return out;
}

// Replicate x along a new leading axis: [..] -> [B, ..].
template <class T>
Tensor<T> tile0(const Tensor<T>& x, int64_t B) {
  if (B < 1) throw BadParam("tile0: B must be >= 1");
  Shape os;
  os.push_back(B);
  for (int64_t d : x.shape()) os.push_back(d);
  Tensor<T> out = Tensor<T>::zeros(os);
  const int64_t n = x.numel();
  for (int64_t b = 0; b < B; ++b)
    std::copy(x.value().begin(), x.value().end(),
              out.value().begin() + b * n);
  detail::finish_op<T>({x}, {out}, [x, out, B, n]() {
    if (!x.requires_grad()) return;
    const T* go = out.grad().data();
    T* gx = x.grad().data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) gx[i] += go[b * n + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv3x3: stride 1, padding 1 cross-correlation. x [B,C,H,W], w [O,C,3,3],
// b [O] -> [B,O,H,W].

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw ShapeMismatch("conv3x3: x [B,C,H,W], w [O,C,3,3]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0);
  if (w.dim(1) != C) throw ShapeMismatch("conv3x3: channel mismatch");
  if (b.numel() != O) throw ShapeMismatch("conv3x3: bias length");
  Tensor<T> out = Tensor<T>::zeros({B, O, H, W});
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  T* ov = out.value().data();
  auto X = [&](int64_t bb, int64_t c, int64_t i, int64_t j) {
    return xv[((bb * C + c) * H + i) * W + j];
  };
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          T acc = bv[o];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t di = 0; di < 3; ++di) {
              const int64_t pi = i + di - 1;
              if (pi < 0 || pi >= H) continue;
              for (int64_t dj = 0; dj < 3; ++dj) {
                const int64_t pj = j + dj - 1;
                if (pj < 0 || pj >= W) continue;
                acc += X(bb, c, pi, pj) * wv[((o * C + c) * 3 + di) * 3 + dj];
              }
            }
          ov[((bb * O + o) * H + i) * W + j] = acc;
        }
  detail::finish_op<T>({x, w, b}, {out}, [x, w, b, out, B, C, H, W, O]() {
    const T* go = out.grad().data();
    const T* xv = x.value().data();
    const T* wv = w.value().data();
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t o = 0; o < O; ++o)
        for (int64_t i = 0; i < H; ++i)
          for (int64_t j = 0; j < W; ++j) {
            const T g = go[((bb * O + o) * H + i) * W + j];
            if (b.requires_grad()) b.grad()[o] += g;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t di = 0; di < 3; ++di) {
                const int64_t pi = i + di - 1;
                if (pi < 0 || pi >= H) continue;
                for (int64_t dj = 0; dj < 3; ++dj) {
                  const int64_t pj = j + dj - 1;
                  if (pj < 0 || pj >= W) continue;
                  const int64_t xi = ((bb * C + c) * H + pi) * W + pj;
                  const int64_t wi = ((o * C + c) * 3 + di) * 3 + dj;
                  if (x.requires_grad()) x.grad()[xi] += g * wv[wi];
                  if (w.requires_grad()) w.grad()[wi] += g * xv[xi];
                }
              }
          }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Patch unfold/fold: [B,C,H,W] <-> [B,N,P*P*C] with N=(H/P)*(W/P). Feature
// order inside a token is channel-major: f = c*P*P + pi*P + pj.

template <class T>
Tensor<T> unfold_patches(const Tensor<T>& x, int64_t P) {
  if (x.rank() != 4) throw ShapeMismatch("unfold_patches: x must be [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (P < 1 || H % P != 0 || W % P != 0)
    throw ShapeMismatch("unfold_patches: H,W must be divisible by P");
  const int64_t GH = H / P, GW = W / P, N = GH * GW, F = P * P * C;
  Tensor<T> out = Tensor<T>::zeros({B, N, F});
  const T* xv = x.value().data();
  T* ov = out.value().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      const int64_t gi = n / GW, gj = n % GW;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t pi = 0; pi < P; ++pi)
          for (int64_t pj = 0; pj < P; ++pj)
            ov[(b * N + n) * F + c * P * P + pi * P + pj] =
                xv[((b * C + c) * H + gi * P + pi) * W + gj * P + pj];
    }
  detail::finish_op<T>({x}, {out}, [x, out, B, C, H, W, P, GW, N, F]() {
    if (!x.requires_grad()) return;
    const T* go = out.grad().data();
    T* gx = x.grad().data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n) {
        const int64_t gi = n / GW, gj = n % GW;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t pi = 0; pi < P; ++pi)
            for (int64_t pj = 0; pj < P; ++pj)
              gx[((b * C + c) * H + gi * P + pi) * W + gj * P + pj] +=
                  go[(b * N + n) * F + c * P * P + pi * P + pj];
      }
  });
  return out;
}

template <class T>
Tensor<T> fold_patches(const Tensor<T>& tokens, int64_t C, int64_t H,
                       int64_t W, int64_t P) {
  if (tokens.rank() != 3) throw ShapeMismatch("fold_patches: want [B,N,F]");
  const int64_t B = tokens.dim(0), N = tokens.dim(1), F = tokens.dim(2);
  const int64_t GH = H / P, GW = W / P;
  if (H % P != 0 || W % P != 0 || N != GH * GW || F != P * P * C)
    throw ShapeMismatch("fold_patches: inconsistent geometry");
  Tensor<T> out = Tensor<T>::zeros({B, C, H, W});
  const T* tv = tokens.value().data();
  T* ov = out.value().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      const int64_t gi = n / GW, gj = n % GW;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t pi = 0; pi < P; ++pi)
          for (int64_t pj = 0; pj < P; ++pj)
            ov[((b * C + c) * H + gi * P + pi) * W + gj * P + pj] =
                tv[(b * N + n) * F + c * P * P + pi * P + pj];
    }
  detail::finish_op<T>({tokens}, {out},
                       [tokens, out, B, C, H, W, P, GW, N, F]() {
    if (!tokens.requires_grad()) return;
    const T* go = out.grad().data();
    T* gt = tokens.grad().data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n) {
        const int64_t gi = n / GW, gj = n % GW;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t pi = 0; pi < P; ++pi)
            for (int64_t pj = 0; pj < P; ++pj)
              gt[(b * N + n) * F + c * P * P + pi * P + pj] +=
                  go[((b * C + c) * H + gi * P + pi) * W + gj * P + pj];
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct CheckReport {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double tol = 0.0;
  bool pass = false;
};

// Compares tape gradients of a scalar-valued f against central differences.
// Relative error uses a floor of 1 in the denominator so near-zero entries
// are compared absolutely.
template <class T>
CheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                       const Tensor<T>& x0, double h, double tol) {
  if (h < 1e-7 || h > 1e-3) throw BadRange("grad_check: h outside [1e-7,1e-3]");
  Tensor<T> x = Tensor<T>::param(x0.shape(), x0.value());
  std::vector<T> g;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> y = f(x);
    if (y.numel() != 1) throw NotScalar("grad_check: f must be scalar-valued");
    tape.backward(y);
    g = x.grad();
  }
  CheckReport rep;
  rep.tol = tol;
  {
    NoTapeScope<T> quiet;
    for (int64_t i = 0; i < x.numel(); ++i) {
      const T saved = x.value()[i];
      x.value()[i] = saved + static_cast<T>(h);
      const double fp = static_cast<double>(f(x).item());
      x.value()[i] = saved - static_cast<T>(h);
      const double fm = static_cast<double>(f(x).item());
      x.value()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double gi = static_cast<double>(g[i]);
      const double err =
          std::abs(gi - fd) / std::max({1.0, std::abs(gi), std::abs(fd)});
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_index = i;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace sdit
