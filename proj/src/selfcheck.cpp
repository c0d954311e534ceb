#include "sdit/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sdit/diffusion.hpp"
#include "sdit/model.hpp"
#include "sdit/rng.hpp"
#include "sdit/rwkv.hpp"
#include "sdit/spiking.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

namespace {

using TD = Tensor<double>;
using ModelD = SditModel<double>;

struct Suite {
  std::vector<CheckResult>& out;
  std::string group;
  void add(const std::string& name, bool pass, const std::string& detail = "") {
    out.push_back({group, name, pass, detail});
  }
};

std::string err_str(double e) {
  std::ostringstream os;
  os << "max rel err " << e;
  return os.str();
}

bool bit_equal(const TD& a, const TD& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.value()[i] != b.value()[i]) return false;
  return true;
}

ModelConfig check_cfg() {
  ModelConfig c;
  c.image_size = 8;
  c.channels = 1;
  c.patch_size = 2;
  c.hidden_dim = 16;
  c.num_input_blocks = 1;
  c.num_mid_blocks = 1;
  c.num_output_blocks = 1;
  c.spike_steps = 2;
  return c;
}

void grad_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "grad"};
  Rng rng(seed);

  {
    TD a0 = TD::randn({3, 4}, rng, 1.0, false);
    TD b0 = TD::randn({4, 2}, rng, 1.0, false);
    auto fa = [&](const TD& x) { return sum(matmul(x, b0)); };
    auto fb = [&](const TD& x) { return sum(matmul(a0, x)); };
    auto ra = grad_check<double>(fa, a0, 1e-5, 1e-5);
    auto rb = grad_check<double>(fb, b0, 1e-5, 1e-5);
    s.add("matmul backward vs finite differences", ra.pass && rb.pass,
          err_str(std::max(ra.max_rel_err, rb.max_rel_err)));
  }
  {
    TD x0 = TD::randn({2, 5}, rng, 1.0, false);
    TD g0 = TD::randn({5}, rng, 0.5, false);
    TD b0 = TD::randn({5}, rng, 0.5, false);
    auto f = [&](const TD& x) {
      return sum(sigmoid(layer_norm(x, g0, b0, 1e-5)));
    };
    auto r = grad_check<double>(f, x0, 1e-5, 1e-5);
    s.add("layer_norm backward vs finite differences", r.pass,
          err_str(r.max_rel_err));
  }
  {
    TD x0 = TD::randn({1, 2, 4, 4}, rng, 1.0, false);
    TD w0 = TD::randn({2, 2, 3, 3}, rng, 0.5, false);
    TD b0 = TD::randn({2}, rng, 0.5, false);
    auto f = [&](const TD& x) { return sum(conv3x3(x, w0, b0)); };
    auto r = grad_check<double>(f, x0, 1e-5, 1e-5);
    s.add("conv3x3 backward vs finite differences", r.pass,
          err_str(r.max_rel_err));
  }
  {
    TD x0 = TD::randn({2, 3}, rng, 1.0, false);
    for (auto& v : x0.value())
      if (std::abs(v) < 1e-3) v += 0.5;
    auto f = [&](const TD& x) {
      return sum(relu_squared(x)) + sum(softplus(x)) + mean(sigmoid(x));
    };
    auto r = grad_check<double>(f, x0, 1e-5, 1e-5);
    s.add("elementwise suite backward vs finite differences", r.pass,
          err_str(r.max_rel_err));
  }
  {
    TD w = TD::randn({4, 3}, rng, 1.0, false);
    TD x0 = TD::randn({2, 4}, rng, 1.0, false);
    auto f = [&](const TD& x) { return sum(sigmoid(matmul(x, w))); };
    auto r = grad_check<double>(f, x0, 1e-5, 1e-5);
    s.add("sigmoid-matmul composite chain", r.pass, err_str(r.max_rel_err));
  }
  {
    ModelConfig c = check_cfg();
    c.image_size = 4;
    c.hidden_dim = 4;
    c.lif.mode = LifMode::smooth;
    ModelD m = ModelD::init(c, seed + 1);
    TD x0 = TD::randn({1, c.num_patches(), 4}, rng, 0.8, false);
    auto f = [&](const TD& x) {
      m.reset_states();
      return sum(m.block_forward(x, nullptr, m.blocks[0]));
    };
    auto r = grad_check<double>(f, x0, 1e-5, 1e-4);
    s.add("spiking transformer block gradcheck (smooth relaxation)", r.pass,
          err_str(r.max_rel_err));
  }
  {
    // Binary-mode surrogate chain on a scalar, against the hand chain rule.
    LifConfig lif;
    const double xval = 1.3;
    TD x = TD::param({1}, {xval});
    LifState<double> st;
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      tape.backward(sum(lif_step(x, st, lif)));
    }
    const double H = xval / lif.tau;
    const double want =
        surrogate_grad_scalar(H - lif.v_threshold, lif.surrogate_alpha) /
        lif.tau;
    const bool ok = std::abs(x.grad()[0] - want) < 1e-12;
    s.add("binary LIF gradient equals surrogate chain rule", ok);
  }
}

void wkv_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "wkv"};
  Rng rng(seed + 10);

  {
    double worst = 0;
    for (int inst = 0; inst < 100; ++inst) {
      const int64_t L = 1 + rng.uniform_int(16);
      const int64_t D = 1 + rng.uniform_int(8);
      TD k = TD::randn({1, L, D}, rng, 1.0, false);
      TD v = TD::randn({1, L, D}, rng, 1.0, false);
      TD w = TD::randn({D}, rng, 1.0, false);
      for (auto& x : w.value()) x = std::abs(x);
      TD u = TD::randn({D}, rng, 1.0, false);
      TD y = wkv_scan(k, v, w, u);
      auto ref = reference::wkv_double_sum(k.value(), v.value(), w.value(),
                                           u.value(), 1, L, D);
      for (int64_t i = 0; i < y.numel(); ++i)
        worst = std::max(worst, std::abs(y.value()[i] - ref[i]) /
                                    std::max(1.0, std::abs(ref[i])));
    }
    s.add("stabilized scan equals double-sum oracle (100 instances)",
          worst < 1e-10, err_str(worst));
  }
  {
    bool convex = true, causal = true;
    for (int inst = 0; inst < 100 && (convex && causal); ++inst) {
      const int64_t L = 2 + rng.uniform_int(8);
      const int64_t D = 1 + rng.uniform_int(4);
      TD k = TD::randn({1, L, D}, rng, 1.5, false);
      TD v = TD::randn({1, L, D}, rng, 1.5, false);
      TD w = TD::randn({D}, rng, 1.0, false);
      for (auto& x : w.value()) x = std::abs(x);
      TD u = TD::randn({D}, rng, 1.0, false);
      TD y = wkv_scan(k, v, w, u);
      for (int64_t t = 0; t < L && convex; ++t)
        for (int64_t d = 0; d < D; ++d) {
          double lo = 1e300, hi = -1e300;
          for (int64_t i = 0; i <= t; ++i) {
            lo = std::min(lo, v.value()[i * D + d]);
            hi = std::max(hi, v.value()[i * D + d]);
          }
          const double slack = 1e-12 * (1 + std::abs(lo) + std::abs(hi));
          if (y.value()[t * D + d] < lo - slack ||
              y.value()[t * D + d] > hi + slack)
            convex = false;
        }
      const int64_t cut = 1 + rng.uniform_int(L - 1);
      TD k2 = TD::from(k.shape(), k.value());
      for (int64_t t = cut; t < L; ++t)
        for (int64_t d = 0; d < D; ++d) k2.value()[t * D + d] += 1.0;
      TD y2 = wkv_scan(k2, v, w, u);
      for (int64_t t = 0; t < cut; ++t)
        for (int64_t d = 0; d < D; ++d)
          if (y.value()[t * D + d] != y2.value()[t * D + d]) causal = false;
    }
    s.add("wkv is a convex combination of past values", convex);
    s.add("wkv is causal (future perturbations leave prefixes bit-equal)",
          causal);
  }
  {
    TD k = TD::randn({1, 7, 3}, rng, 1.0, false);
    TD v = TD::randn({1, 7, 3}, rng, 1.0, false);
    TD w = TD::randn({3}, rng, 1.0, false);
    for (auto& x : w.value()) x = std::abs(x);
    TD u = TD::randn({3}, rng, 1.0, false);
    TD y1 = wkv_scan(k, v, w, u);
    TD k2 = TD::from(k.shape(), k.value());
    for (auto& x : k2.value()) x += 4.2;
    TD y2 = wkv_scan(k2, v, w, u);
    double worst = 0;
    for (int64_t i = 0; i < y1.numel(); ++i)
      worst = std::max(worst, std::abs(y1.value()[i] - y2.value()[i]) /
                                  std::max(1.0, std::abs(y1.value()[i])));
    s.add("shifting every k by a constant cancels", worst < 1e-10,
          err_str(worst));
  }
  {
    const int64_t L = 5, D = 2;
    TD k0 = TD::randn({1, L, D}, rng, 1.0, false);
    TD v0 = TD::randn({1, L, D}, rng, 1.0, false);
    TD w0 = TD::from({D}, {0.4, 1.1});
    TD u0 = TD::randn({D}, rng, 1.0, false);
    TD mask = TD::randn({1, L, D}, rng, 1.0, false);
    double worst = 0;
    bool pass = true;
    for (int which = 0; which < 4; ++which) {
      auto f = [&](const TD& t) {
        TD y = which == 0   ? wkv_scan(t, v0, w0, u0)
               : which == 1 ? wkv_scan(k0, t, w0, u0)
               : which == 2 ? wkv_scan(k0, v0, softplus(t), u0)
                            : wkv_scan(k0, v0, w0, t);
        return sum(mul(y, mask));
      };
      const TD& x0 = which == 0 ? k0 : which == 1 ? v0 : which == 2 ? w0 : u0;
      auto r = grad_check<double>(f, x0, 1e-5, 1e-6);
      pass = pass && r.pass;
      worst = std::max(worst, r.max_rel_err);
    }
    s.add("wkv backward matches finite differences (k, v, w, u)", pass,
          err_str(worst));
  }
}

void lif_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "lif"};
  LifConfig cfg;
  {
    bool ok = true;
    LifState<double> st;
    for (int t = 0; t < 8 && ok; ++t) {
      TD sp = lif_step(TD::zeros({3, 3}), st, cfg);
      for (double v : sp.value()) ok = ok && v == 0.0;
    }
    s.add("zero input from fresh state yields zero spikes (T<=8)", ok);
  }
  {
    bool binary = true, below = true;
    LifState<double> st;
    Rng rng(seed + 20);
    for (int t = 0; t < 6; ++t) {
      TD x = TD::randn({4, 4}, rng, 2.0, false);
      TD sp = lif_step(x, st, cfg);
      for (double v : sp.value()) binary = binary && (v == 0.0 || v == 1.0);
      for (double v : st.v.value()) below = below && v < cfg.v_threshold;
    }
    s.add("spike outputs are exactly {0,1}", binary);
    s.add("membrane stays below threshold after hard reset", below);
  }
  {
    LifState<double> st;
    TD sp = lif_step(TD::full({1}, 2.0), st, cfg);
    bool ok = sp.value()[0] == 1.0 && st.v.value()[0] == 0.0;
    LifState<double> st2;
    TD a = lif_step(TD::full({1}, 0.8), st2, cfg);
    ok = ok && a.value()[0] == 0.0 && std::abs(st2.v.value()[0] - 0.4) < 1e-12;
    TD b = lif_step(TD::full({1}, 0.8), st2, cfg);
    ok = ok && b.value()[0] == 0.0 && std::abs(st2.v.value()[0] - 0.6) < 1e-12;
    s.add("hand-simulated traces match to 1e-12", ok);
  }
  {
    const double g0 = surrogate_grad_scalar(0.0, 2.0);
    bool ok = g0 == 1.0;
    Rng rng(seed + 21);
    for (int i = 0; i < 20; ++i) {
      const double u = rng.normal() * 3;
      ok = ok && surrogate_grad_scalar(u, 2.0) ==
                     surrogate_grad_scalar(-u, 2.0);
    }
    double acc = 0;
    const int n = 200000;
    const double h = 200.0 / n;
    for (int i = 0; i <= n; ++i) {
      const double u = -100.0 + i * h;
      const double g = surrogate_grad_scalar(u, 2.0);
      acc += (i == 0 || i == n) ? g / 2 : g;
    }
    acc *= h;
    ok = ok && std::abs(acc - 1.0) < 0.01;
    s.add("surrogate: even, g(0)=alpha/2, integral ~ 1", ok);
  }
}

void recon_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "recon"};
  {
    ModelConfig c = check_cfg();
    ModelD m = ModelD::init(c, seed + 30);
    auto& bp = m.blocks[0];
    std::fill(bp.W_N.value().begin(), bp.W_N.value().end(), 0.0);
    Rng rng(seed + 31);
    const int64_t N = c.num_patches(), D = c.hidden_dim;
    TD x_ffn = TD::randn({2, 2 * N, D}, rng, 1.0, false);
    TD y = m.reconstruction_apply(x_ffn, bp);
    TD y_prime = split(x_ffn, 1, {N, N})[0];
    s.add("W_N = 0 collapses to the plain split path (bit-exact)",
          bit_equal(y, y_prime));
  }
  {
    ModelConfig ca = check_cfg();
    ca.use_recon_module = false;
    ModelConfig cb = check_cfg();
    ModelD ma = ModelD::init(ca, seed + 32);
    ModelD mb = ModelD::init(cb, seed + 32);
    for (auto& b : mb.blocks) {
      std::fill(b.W_D.value().begin(), b.W_D.value().end(), 0.0);
      std::fill(b.W_N.value().begin(), b.W_N.value().end(), 0.0);
    }
    Rng rng(seed + 33);
    TD x = TD::randn({2, 1, 8, 8}, rng, 1.0, false);
    ma.reset_states();
    mb.reset_states();
    TD ya = ma.forward(x, 5);
    TD yb = mb.forward(x, 5);
    s.add("ablated path equals the zeroed-and-frozen model (bit-exact)",
          bit_equal(ya, yb));
  }
  {
    ModelConfig c = check_cfg();
    c.image_size = 6;
    c.hidden_dim = 5;
    ModelD m = ModelD::init(c, seed + 34);
    auto& bp = m.blocks[0];
    Rng rng(seed + 35);
    bp.W_D = TD::randn({5, 9}, rng, 0.5, true);
    bp.W_N = TD::randn({9, 5}, rng, 0.5, true);
    TD y_prime = TD::randn({1, 9, 5}, rng, 1.0, false);
    TD z_prime = TD::randn({1, 9, 5}, rng, 1.0, false);
    TD x_ffn = concat<double>({y_prime, z_prime}, 1);
    TD y = m.reconstruction_apply(x_ffn, bp);
    auto ref = reference::reconstruction_naive(y_prime.value(),
                                               z_prime.value(), 1, 9, 5,
                                               bp.W_D.value(), bp.W_N.value());
    double worst = 0;
    for (int64_t i = 0; i < y.numel(); ++i)
      worst = std::max(worst, std::abs(y.value()[i] - ref[i]));
    s.add("reconstruction equals the straight-line reference", worst < 1e-12,
          err_str(worst));
  }
}

void skip_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "skip"};
  for (int64_t K : {int64_t(1), int64_t(2), int64_t(4)}) {
    ModelConfig c = check_cfg();
    c.num_input_blocks = K;
    c.num_output_blocks = K;
    c.spike_steps = 1;
    ModelD m = ModelD::init(c, seed + 40 + K);
    Rng rng(seed + 50 + K);
    TD x = TD::randn({1, 1, 8, 8}, rng, 1.0, false);
    bool ok = true;
    for (int64_t tap = 0; tap < K && ok; ++tap) {
      std::vector<TD> base(K), moved(K);
      ForwardProbe<double> p1;
      p1.on_skip_consume = [&](int64_t j, const TD& t) {
        base[j] = TD::from(t.shape(), t.value());
      };
      m.reset_states();
      (void)m.forward(x, 0, &p1);
      ForwardProbe<double> p2;
      p2.on_skip_store = [&](int64_t i, TD& t) {
        if (i == tap) t = add_scalar(t, 0.25);
      };
      p2.on_skip_consume = [&](int64_t j, const TD& t) {
        moved[j] = TD::from(t.shape(), t.value());
      };
      m.reset_states();
      (void)m.forward(x, 0, &p2);
      for (int64_t j = 0; j < K; ++j) {
        const bool expect_change = (j == K - 1 - tap);
        if (bit_equal(base[j], moved[j]) == expect_change) ok = false;
      }
    }
    s.add("marker perturbation pairs input i with output K-1-i (K=" +
              std::to_string(K) + ")",
          ok);
  }
}

void schedule_suite(std::vector<CheckResult>& out, uint64_t seed) {
  Suite s{out, "schedule"};
  {
    auto sc = make_schedule_linear(1000, 1e-4, 0.02);
    bool mono = true;
    for (int64_t t = 1; t < sc.T_diff; ++t)
      mono = mono && sc.alpha_bar[t] < sc.alpha_bar[t - 1] &&
             sc.alpha_bar[t] > 0.0 && sc.alpha_bar[t] < 1.0;
    s.add("alpha_bar strictly decreasing in (0,1), T=1000", mono);
    s.add("alpha_bar final value < 0.01", sc.alpha_bar.back() < 0.01);
  }
  {
    auto sc = make_schedule_linear(20, 0.05, 0.05);
    bool ok = true;
    for (int64_t t = 0; t < 20; ++t)
      ok = ok &&
           std::abs(sc.alpha_bar[t] - std::pow(0.95, double(t + 1))) < 1e-12;
    s.add("constant-beta closed form (1-b)^(t+1)", ok);
  }
  {
    auto sc = make_schedule_linear(50, 1e-4, 0.02);
    Rng rng(seed + 60);
    bool ok = true;
    double worst = 0;
    const int64_t n = 10000;
    TD zeros = TD::zeros({n});
    for (int64_t t : {int64_t(5), int64_t(25), int64_t(49)}) {
      std::vector<double> e(n);
      for (auto& v : e) v = rng.normal();
      TD y = q_sample(zeros, t, TD::from({n}, std::move(e)), sc);
      double mu = 0, var = 0;
      for (double v : y.value()) mu += v;
      mu /= n;
      for (double v : y.value()) var += (v - mu) * (v - mu);
      var /= n;
      const double want = 1.0 - sc.alpha_bar[t];
      const double rel = std::abs(var - want) / want;
      worst = std::max(worst, rel);
      ok = ok && rel < 0.03;
    }
    s.add("q_sample Monte Carlo variance within 3% (10k draws)", ok,
          err_str(worst));
  }
}

}  // namespace

std::vector<std::string> check_groups() {
  return {"grad", "wkv", "lif", "recon", "skip", "schedule"};
}

std::vector<CheckResult> run_checks(const std::vector<std::string>& only,
                                    uint64_t seed) {
  auto wanted = [&](const std::string& g) {
    if (only.empty()) return true;
    return std::find(only.begin(), only.end(), g) != only.end();
  };
  std::vector<CheckResult> out;
  if (wanted("grad")) grad_suite(out, seed);
  if (wanted("wkv")) wkv_suite(out, seed);
  if (wanted("lif")) lif_suite(out, seed);
  if (wanted("recon")) recon_suite(out, seed);
  if (wanted("skip")) skip_suite(out, seed);
  if (wanted("schedule")) schedule_suite(out, seed);
  return out;
}

}  // namespace sdit
