#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace sdit {

// One verification outcome, as printed by `sdit verify`.
struct CheckResult {
  std::string group;
  std::string name;
  bool pass = false;
  std::string detail;
};

// Runs the built-in verification suites. `only` filters by group name
// (empty = all). Groups: grad, wkv, lif, recon, skip, schedule.
std::vector<CheckResult> run_checks(const std::vector<std::string>& only,
                                    uint64_t seed);
std::vector<std::string> check_groups();

// Independent reference implementations ("oracles"). Straight-line loops on
// raw buffers, no tensor/tape machinery, kept deliberately naive so they
// cannot share a bug with the production path.
namespace reference {

// Plain 6-loop cross-correlation, padding 1, stride 1.
inline std::vector<double> conv3x3_naive(const std::vector<double>& x,
                                         int64_t B, int64_t C, int64_t H,
                                         int64_t W,
                                         const std::vector<double>& w,
                                         int64_t O,
                                         const std::vector<double>& bias) {
  std::vector<double> y(B * O * H * W, 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double acc = bias[o];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t di = -1; di <= 1; ++di)
              for (int64_t dj = -1; dj <= 1; ++dj) {
                const int64_t pi = i + di, pj = j + dj;
                if (pi < 0 || pi >= H || pj < 0 || pj >= W) continue;
                acc += x[((b * C + c) * H + pi) * W + pj] *
                       w[((o * C + c) * 3 + (di + 1)) * 3 + (dj + 1)];
              }
          y[((b * O + o) * H + i) * W + j] = acc;
        }
  return y;
}

// Direct double-sum WKV with raw exponentials. Valid for moderate k; that is
// the point — it is the textbook formula, not the stabilized scan.
inline std::vector<double> wkv_double_sum(const std::vector<double>& k,
                                          const std::vector<double>& v,
                                          const std::vector<double>& w,
                                          const std::vector<double>& u,
                                          int64_t B, int64_t L, int64_t D) {
  std::vector<double> y(B * L * D, 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d)
      for (int64_t t = 0; t < L; ++t) {
        double num = 0.0, den = 0.0;
        for (int64_t i = 0; i < t; ++i) {
          const double e =
              std::exp(-double(t - 1 - i) * w[d] + k[(b * L + i) * D + d]);
          num += e * v[(b * L + i) * D + d];
          den += e;
        }
        const double eb = std::exp(u[d] + k[(b * L + t) * D + d]);
        num += eb * v[(b * L + t) * D + d];
        den += eb;
        y[(b * L + t) * D + d] = num / den;
      }
  return y;
}

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line Channel-Mixing: token shift, projections, squared ReLU,
// forget gate. mu values here are the already-squashed coefficients.
inline std::vector<double> channel_mix_naive(
    const std::vector<double>& x, int64_t B, int64_t L, int64_t D,
    int64_t Dff, const std::vector<double>& mu_r,
    const std::vector<double>& mu_k, const std::vector<double>& W_r,
    const std::vector<double>& W_k, const std::vector<double>& W_v) {
  auto shifted = [&](const std::vector<double>& mu, int64_t b, int64_t t,
                     int64_t d) {
    const double prev = t > 0 ? x[(b * L + t - 1) * D + d] : 0.0;
    return mu[d] * x[(b * L + t) * D + d] + (1.0 - mu[d]) * prev;
  };
  std::vector<double> out(B * L * D, 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < L; ++t) {
      std::vector<double> r(D, 0.0), kk(Dff, 0.0), vv(D, 0.0);
      for (int64_t j = 0; j < D; ++j)
        for (int64_t d = 0; d < D; ++d)
          r[j] += shifted(mu_r, b, t, d) * W_r[d * D + j];
      for (int64_t j = 0; j < Dff; ++j)
        for (int64_t d = 0; d < D; ++d)
          kk[j] += shifted(mu_k, b, t, d) * W_k[d * Dff + j];
      for (int64_t j = 0; j < D; ++j)
        for (int64_t f = 0; f < Dff; ++f) {
          const double m = std::max(kk[f], 0.0);
          vv[j] += m * m * W_v[f * D + j];
        }
      for (int64_t j = 0; j < D; ++j)
        out[(b * L + t) * D + j] = sigmoid_ref(r[j]) * vv[j];
    }
  return out;
}

// Straight-line Reconstruction Module on an already-split pair:
// zD = z' W_D, swap last two axes, zN = zD^T W_N, y = y' + zN .* y'.
inline std::vector<double> reconstruction_naive(
    const std::vector<double>& y_prime, const std::vector<double>& z_prime,
    int64_t B, int64_t N, int64_t D, const std::vector<double>& W_D,
    const std::vector<double>& W_N) {
  std::vector<double> out(B * N * D, 0.0);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> zD(N * N, 0.0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t m = 0; m < N; ++m)
        for (int64_t d = 0; d < D; ++d)
          zD[n * N + m] += z_prime[(b * N + n) * D + d] * W_D[d * N + m];
    std::vector<double> zN(N * D, 0.0);
    for (int64_t m = 0; m < N; ++m)
      for (int64_t d = 0; d < D; ++d)
        for (int64_t n = 0; n < N; ++n)
          zN[m * D + d] += zD[n * N + m] * W_N[n * D + d];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t d = 0; d < D; ++d) {
        const double yp = y_prime[(b * N + n) * D + d];
        out[(b * N + n) * D + d] = yp + zN[n * D + d] * yp;
      }
  }
  return out;
}

}  // namespace reference
}  // namespace sdit
