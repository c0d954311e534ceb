#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "sdit/errors.hpp"
#include "sdit/rng.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

namespace detail {
// Test fixture: flips the sign of the bonus-vector gradient inside the WKV
// backward so verification harnesses can prove they catch a broken backward.
inline bool wkv_negate_grad_u = false;
}  // namespace detail

// Per-channel convex blend of each token with its predecessor (zero row
// before the first token): out[t] = mu*x[t] + (1-mu)*x[t-1].
template <class T>
Tensor<T> token_shift(const Tensor<T>& x, const Tensor<T>& mu) {
  if (x.rank() != 3) throw ShapeMismatch("token_shift: x must be [B,L,D]");
  const int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (mu.numel() != D)
    throw ShapeMismatch("token_shift: mu length " +
                        std::to_string(mu.numel()) + " vs D " +
                        std::to_string(D));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.value().data();
  const T* mv = mu.value().data();
  T* ov = out.value().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < L; ++t)
      for (int64_t d = 0; d < D; ++d) {
        const T prev = t > 0 ? xv[(b * L + t - 1) * D + d] : T(0);
        ov[(b * L + t) * D + d] =
            mv[d] * xv[(b * L + t) * D + d] + (T(1) - mv[d]) * prev;
      }
  detail::finish_op<T>({x, mu}, {out}, [x, mu, out, B, L, D]() {
    const T* go = out.grad().data();
    const T* xv = x.value().data();
    const T* mv = mu.value().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < L; ++t)
          for (int64_t d = 0; d < D; ++d) {
            gx[(b * L + t) * D + d] += go[(b * L + t) * D + d] * mv[d];
            if (t + 1 < L)
              gx[(b * L + t) * D + d] +=
                  go[(b * L + t + 1) * D + d] * (T(1) - mv[d]);
          }
    }
    if (mu.requires_grad()) {
      T* gm = mu.grad().data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < L; ++t)
          for (int64_t d = 0; d < D; ++d) {
            const T prev = t > 0 ? xv[(b * L + t - 1) * D + d] : T(0);
            gm[d] += go[(b * L + t) * D + d] *
                     (xv[(b * L + t) * D + d] - prev);
          }
    }
  });
  return out;
}

// WKV attention: per channel,
//   wkv_t = (sum_{i<t} e^{-(t-1-i)w + k_i} v_i + e^{u+k_t} v_t)
//         / (sum_{i<t} e^{-(t-1-i)w + k_i}       + e^{u+k_t})
// with w >= 0 the positive decay. Computed by a streaming (num, den, max)
// state recurrence so no raw exponential is ever materialized. Backward is
// the direct O(L^2) accumulation of the normalized-weight derivatives, with
// a per-step max shift for the same stability.
template <class T>
Tensor<T> wkv_scan(const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& w,
                   const Tensor<T>& u) {
  if (k.rank() != 3 || v.shape() != k.shape())
    throw ShapeMismatch("wkv_scan: k,v must be matching [B,L,D]");
  const int64_t B = k.dim(0), L = k.dim(1), D = k.dim(2);
  if (w.numel() != D || u.numel() != D)
    throw ShapeMismatch("wkv_scan: w,u must have length D");
  detail::ensure_all_finite(k, "wkv_scan");
  detail::ensure_all_finite(v, "wkv_scan");
  detail::ensure_all_finite(w, "wkv_scan");
  detail::ensure_all_finite(u, "wkv_scan");

  Tensor<T> out = Tensor<T>::zeros(k.shape());
  const T* kv = k.value().data();
  const T* vv = v.value().data();
  const T* wv = w.value().data();
  const T* uv = u.value().data();
  T* ov = out.value().data();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d) {
      // num/den hold the decayed history sums scaled by e^{-m}.
      T num = T(0), den = T(0), m = neg_inf;
      for (int64_t t = 0; t < L; ++t) {
        const int64_t idx = (b * L + t) * D + d;
        const T kt = kv[idx], vt = vv[idx];
        const T bonus = uv[d] + kt;
        const T mo = std::max(m, bonus);
        const T eh = m == neg_inf ? T(0) : std::exp(m - mo);
        const T eb = std::exp(bonus - mo);
        ov[idx] = (num * eh + eb * vt) / (den * eh + eb);
        // Fold the token into the history with one decay applied.
        const T md = m == neg_inf ? neg_inf : m - wv[d];
        const T mn = std::max(md, kt);
        const T ed = md == neg_inf ? T(0) : std::exp(md - mn);
        const T ek = std::exp(kt - mn);
        num = num * ed + ek * vt;
        den = den * ed + ek;
        m = mn;
      }
    }

  detail::finish_op<T>({k, v, w, u}, {out}, [k, v, w, u, out, B, L, D]() {
    const T* kv = k.value().data();
    const T* vv = v.value().data();
    const T* wv = w.value().data();
    const T* uv = u.value().data();
    const T* yv = out.value().data();
    const T* go = out.grad().data();
    const bool negate_u = detail::wkv_negate_grad_u;
    std::vector<T> expo(L);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) {
        for (int64_t t = 0; t < L; ++t) {
          const int64_t tix = (b * L + t) * D + d;
          const T g = go[tix];
          if (g == T(0)) continue;
          const T yt = yv[tix];
          // Rebuild the normalized weights q_i = e^{E_i - m}/S for this t.
          T m = uv[d] + kv[tix];
          for (int64_t i = 0; i < t; ++i)
            m = std::max(m, kv[(b * L + i) * D + d] -
                                static_cast<T>(t - 1 - i) * wv[d]);
          T S = T(0);
          for (int64_t i = 0; i < t; ++i) {
            expo[i] = std::exp(kv[(b * L + i) * D + d] -
                               static_cast<T>(t - 1 - i) * wv[d] - m);
            S += expo[i];
          }
          const T pb = std::exp(uv[d] + kv[tix] - m);
          S += pb;
          for (int64_t i = 0; i < t; ++i) {
            const int64_t iix = (b * L + i) * D + d;
            const T q = expo[i] / S;
            const T dv = vv[iix] - yt;
            if (k.requires_grad()) k.grad()[iix] += g * q * dv;
            if (v.requires_grad()) v.grad()[iix] += g * q;
            if (w.requires_grad())
              w.grad()[d] -= g * q * dv * static_cast<T>(t - 1 - i);
          }
          const T qb = pb / S;
          const T dvt = vv[tix] - yt;
          if (k.requires_grad()) k.grad()[tix] += g * qb * dvt;
          if (v.requires_grad()) v.grad()[tix] += g * qb;
          if (u.requires_grad())
            u.grad()[d] += (negate_u ? T(-1) : T(1)) * g * qb * dvt;
        }
      }
  });
  return out;
}

// Learnable pieces of Time-Mixing. Raw token-shift coefficients and the raw
// decay live unconstrained; sigmoid / softplus squashings happen in-graph.
template <class T>
struct TimeMixParams {
  Tensor<T> W_r, W_k, W_v, W_o;  // D x D
  Tensor<T> w_raw;               // decay, softplus'ed to >= 0
  Tensor<T> u;                   // bonus for the current token
  Tensor<T> mu_r, mu_k, mu_v;    // raw shift mixes, sigmoid'ed to (0,1)

  static TimeMixParams init(int64_t D, Rng& rng) {
    TimeMixParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    p.W_r = Tensor<T>::randn({D, D}, rng, s, true);
    p.W_k = Tensor<T>::randn({D, D}, rng, s, true);
    p.W_v = Tensor<T>::randn({D, D}, rng, s, true);
    p.W_o = Tensor<T>::randn({D, D}, rng, s, true);
    // Ramped decay start: channels forget at different speeds.
    std::vector<T> wr(D);
    for (int64_t i = 0; i < D; ++i)
      wr[i] = static_cast<T>(-1.0 + 2.0 * (D == 1 ? 0.5 : double(i) / (D - 1)));
    p.w_raw = Tensor<T>::param({D}, std::move(wr));
    p.u = Tensor<T>::randn({D}, rng, 0.1, true);
    p.mu_r = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    p.mu_k = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    p.mu_v = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    return p;
  }
};

template <class T>
struct ChannelMixParams {
  Tensor<T> W_r;        // D x D
  Tensor<T> W_k;        // D x D_ff
  Tensor<T> W_v;        // D_ff x D
  Tensor<T> mu_r, mu_k;

  static ChannelMixParams init(int64_t D, int64_t D_ff, Rng& rng) {
    ChannelMixParams p;
    p.W_r = Tensor<T>::randn({D, D}, rng, 1.0 / std::sqrt(double(D)), true);
    p.W_k = Tensor<T>::randn({D, D_ff}, rng, 1.0 / std::sqrt(double(D)), true);
    p.W_v =
        Tensor<T>::randn({D_ff, D}, rng, 1.0 / std::sqrt(double(D_ff)), true);
    p.mu_r = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    p.mu_k = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    return p;
  }
};

// out = (sigmoid(r) .* wkv(k, v)) W_o with r/k/v from token-shifted inputs.
template <class T>
Tensor<T> time_mixing(const Tensor<T>& x, const TimeMixParams<T>& p) {
  Tensor<T> r = matmul(token_shift(x, sigmoid(p.mu_r)), p.W_r);
  Tensor<T> k = matmul(token_shift(x, sigmoid(p.mu_k)), p.W_k);
  Tensor<T> v = matmul(token_shift(x, sigmoid(p.mu_v)), p.W_v);
  Tensor<T> wkv = wkv_scan(k, v, softplus(p.w_raw), p.u);
  return matmul(mul(sigmoid(r), wkv), p.W_o);
}

// out = sigmoid(r) .* (max(k,0)^2 W_v); the sigmoid is the forget gate.
template <class T>
Tensor<T> channel_mixing(const Tensor<T>& x, const ChannelMixParams<T>& p) {
  Tensor<T> r = matmul(token_shift(x, sigmoid(p.mu_r)), p.W_r);
  Tensor<T> k = matmul(token_shift(x, sigmoid(p.mu_k)), p.W_k);
  return mul(sigmoid(r), matmul(relu_squared(k), p.W_v));
}

}  // namespace sdit
