// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line. Criteria 8 and 9 drive the built binary end to end.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "sdit/checkpoint_io.hpp"
#include "sdit/data_io.hpp"
#include "sdit/diffusion.hpp"
#include "sdit/model.hpp"
#include "sdit/rng.hpp"
#include "sdit/rwkv.hpp"
#include "sdit/selfcheck.hpp"
#include "sdit/spiking.hpp"
#include "sdit/tensor.hpp"

namespace fs = std::filesystem;
using TD = sdit::Tensor<double>;
using ModelD = sdit::SditModel<double>;

namespace {

void report(int n, const std::string& name, bool ok,
            const std::string& detail = "") {
  std::printf("[ACCEPT] %2d %-58s %s%s%s\n", n, name.c_str(),
              ok ? "PASS" : "FAIL", detail.empty() ? "" : "  ",
              detail.c_str());
  std::fflush(stdout);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SDIT_CLI_PATH) + " " + args +
                          " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<uint8_t> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(bool(is));
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(is)),
                              std::istreambuf_iterator<char>());
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "sdit_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool bit_equal(const TD& a, const TD& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.value()[i] != b.value()[i]) return false;
  return true;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

TEST_CASE("criterion 1: gradient correctness") {
  const auto t0 = std::chrono::steady_clock::now();
  sdit::Rng rng(1001);
  double worst_prim = 0;
  bool ok = true;

  auto prim = [&](std::function<TD(const TD&)> f, const TD& x) {
    auto r = sdit::grad_check<double>(f, x, 1e-5, 1e-5);
    ok = ok && r.pass;
    worst_prim = std::max(worst_prim, r.max_rel_err);
  };

  TD a = TD::randn({3, 4}, rng, 1.0, false);
  TD b = TD::randn({4, 2}, rng, 1.0, false);
  prim([&](const TD& t) { return sdit::sum(sdit::matmul(t, b)); }, a);
  prim([&](const TD& t) { return sdit::sum(sdit::matmul(a, t)); }, b);

  TD g = TD::randn({4}, rng, 0.5, false);
  TD be = TD::randn({4}, rng, 0.5, false);
  TD xr = TD::randn({2, 4}, rng, 1.0, false);
  prim([&](const TD& t) {
    return sdit::sum(sdit::sigmoid(sdit::layer_norm(t, g, be, 1e-5)));
  }, xr);

  TD xi = TD::randn({1, 2, 4, 4}, rng, 1.0, false);
  TD wc = TD::randn({2, 2, 3, 3}, rng, 0.5, false);
  TD bc = TD::randn({2}, rng, 0.5, false);
  prim([&](const TD& t) { return sdit::sum(sdit::conv3x3(t, wc, bc)); }, xi);
  prim([&](const TD& t) { return sdit::sum(sdit::conv3x3(xi, t, bc)); }, wc);

  TD xe = TD::randn({3, 3}, rng, 1.0, false);
  for (auto& v : xe.value())
    if (std::abs(v) < 1e-3) v += 0.5;
  prim([&](const TD& t) {
    return sdit::sum(sdit::relu_squared(t)) + sdit::sum(sdit::softplus(t)) +
           sdit::mean(sdit::sigmoid(t)) + sdit::sum(sdit::exp(t));
  }, xe);
  prim([&](const TD& t) { return sdit::sum(sdit::mul(t, xe)); }, xe);
  prim([&](const TD& t) {
    auto parts = sdit::split(sdit::concat<double>({t, xe}, 0), 0, {3, 3});
    return sdit::sum(sdit::mul(parts[0], parts[1]));
  }, xe);
  prim([&](const TD& t) { return sdit::sum(sdit::transpose(t)); }, a);
  prim([&](const TD& t) { return sdit::sum(sdit::unfold_patches(t, 2)); }, xi);
  prim([&](const TD& t) { return sdit::sum(sdit::tile0(t, 3)); }, a);

  TD mu = TD::from({2}, {0.3, 0.8});
  TD xs = TD::randn({1, 3, 2}, rng, 1.0, false);
  prim([&](const TD& t) { return sdit::sum(sdit::token_shift(t, mu)); }, xs);

  TD k0 = TD::randn({1, 5, 2}, rng, 1.0, false);
  TD v0 = TD::randn({1, 5, 2}, rng, 1.0, false);
  TD w0 = TD::from({2}, {0.4, 1.1});
  TD u0 = TD::randn({2}, rng, 1.0, false);
  TD mask = TD::randn({1, 5, 2}, rng, 1.0, false);
  prim([&](const TD& t) {
    return sdit::sum(sdit::mul(sdit::wkv_scan(t, v0, w0, u0), mask));
  }, k0);
  prim([&](const TD& t) {
    return sdit::sum(sdit::mul(sdit::wkv_scan(k0, t, w0, u0), mask));
  }, v0);

  // Full Spiking Transformer Block at B=1, N=2, D=4, T=1 (smooth spikes so
  // central differences are defined), tolerance 1e-4.
  sdit::ModelConfig cfg;
  cfg.image_size = 4;
  cfg.hidden_dim = 4;
  cfg.lif.mode = sdit::LifMode::smooth;
  ModelD host = ModelD::init(cfg, 1002);
  sdit::Rng brng(1003);
  auto block = sdit::BlockParams<double>::init(4, 2, 16, brng, false, false);
  TD xb = TD::randn({1, 2, 4}, brng, 0.8, false);
  auto fb = [&](const TD& x) {
    sdit::reset_state(block.lif1, cfg.lif);
    sdit::reset_state(block.lif2, cfg.lif);
    return sdit::sum(host.block_forward(x, nullptr, block));
  };
  auto rblock = sdit::grad_check<double>(fb, xb, 1e-5, 1e-4);
  ok = ok && rblock.pass;

  const double secs = elapsed_s(t0);
  ok = ok && secs < 60.0;
  char detail[128];
  std::snprintf(detail, sizeof(detail),
                "primitives max err %.3g, block err %.3g, %.1fs", worst_prim,
                rblock.max_rel_err, secs);
  report(1, "gradient correctness (primitives + block)", ok, detail);
  CHECK(ok);
}

TEST_CASE("criterion 2: wkv oracle equivalence") {
  sdit::Rng rng(2001);
  double worst = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int64_t L = 1 + rng.uniform_int(16);
    const int64_t D = 1 + rng.uniform_int(8);
    TD k = TD::randn({1, L, D}, rng, 1.0, false);
    TD v = TD::randn({1, L, D}, rng, 1.0, false);
    TD w = TD::randn({D}, rng, 1.0, false);
    for (auto& x : w.value()) x = std::abs(x);
    TD u = TD::randn({D}, rng, 1.0, false);
    TD y = sdit::wkv_scan(k, v, w, u);
    auto ref = sdit::reference::wkv_double_sum(k.value(), v.value(),
                                               w.value(), u.value(), 1, L, D);
    for (int64_t i = 0; i < y.numel(); ++i)
      worst = std::max(worst, std::abs(y.value()[i] - ref[i]) /
                                  std::max(1.0, std::abs(ref[i])));
  }
  const bool ok = worst < 1e-10;
  report(2, "wkv scan equals the double-sum oracle (100x)", ok,
         "max rel err " + std::to_string(worst));
  CHECK(ok);
}

TEST_CASE("criterion 3: wkv convexity and causality") {
  sdit::Rng rng(3001);
  bool convex = true, causal = true;
  for (int inst = 0; inst < 100; ++inst) {
    const int64_t L = 2 + rng.uniform_int(10);
    const int64_t D = 1 + rng.uniform_int(6);
    TD k = TD::randn({1, L, D}, rng, 1.5, false);
    TD v = TD::randn({1, L, D}, rng, 1.5, false);
    TD w = TD::randn({D}, rng, 1.0, false);
    for (auto& x : w.value()) x = std::abs(x);
    TD u = TD::randn({D}, rng, 1.0, false);
    TD y = sdit::wkv_scan(k, v, w, u);
    for (int64_t t = 0; t < L; ++t)
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
    TD v2 = TD::from(v.shape(), v.value());
    for (int64_t t = cut; t < L; ++t)
      for (int64_t d = 0; d < D; ++d) {
        k2.value()[t * D + d] += rng.normal();
        v2.value()[t * D + d] += rng.normal();
      }
    TD y2 = sdit::wkv_scan(k2, v2, w, u);
    for (int64_t t = 0; t < cut; ++t)
      for (int64_t d = 0; d < D; ++d)
        if (y.value()[t * D + d] != y2.value()[t * D + d]) causal = false;
  }
  report(3, "wkv convex combination + bit-exact causality (100x)",
         convex && causal);
  CHECK(convex);
  CHECK(causal);
}

TEST_CASE("criterion 4: LIF contract") {
  sdit::LifConfig cfg;
  bool ok = true;
  // zero input, any T <= 8
  for (int64_t T = 1; T <= 8; ++T) {
    sdit::LifState<double> st;
    for (int64_t t = 0; t < T; ++t) {
      TD s = sdit::lif_step(TD::zeros({4, 4}), st, cfg);
      for (double v : s.value()) ok = ok && v == 0.0;
    }
  }
  // binary outputs under random drive
  sdit::Rng rng(4001);
  sdit::LifState<double> st;
  for (int t = 0; t < 6; ++t) {
    TD s = sdit::lif_step(TD::randn({5, 5}, rng, 2.0, false), st, cfg);
    for (double v : s.value()) ok = ok && (v == 0.0 || v == 1.0);
  }
  // hand-simulated traces to 1e-12
  sdit::LifState<double> st1;
  TD s1 = sdit::lif_step(TD::full({1}, 2.0), st1, cfg);
  ok = ok && s1.value()[0] == 1.0 && std::abs(st1.v.value()[0] - 0.0) < 1e-12;
  sdit::LifState<double> st2;
  TD a = sdit::lif_step(TD::full({1}, 0.8), st2, cfg);
  ok = ok && a.value()[0] == 0.0 && std::abs(st2.v.value()[0] - 0.4) < 1e-12;
  TD bb = sdit::lif_step(TD::full({1}, 0.8), st2, cfg);
  ok = ok && bb.value()[0] == 0.0 && std::abs(st2.v.value()[0] - 0.6) < 1e-12;
  report(4, "LIF contract (binarity, silence, hand traces)", ok);
  CHECK(ok);
}

TEST_CASE("criterion 5: reconstruction identity and ablation switch") {
  bool ok = true;
  // W_N = 0 collapses the block output to the plain split path, bit-exact
  sdit::ModelConfig c;
  c.image_size = 8;
  c.hidden_dim = 16;
  ModelD m = ModelD::init(c, 5001);
  auto& bp = m.blocks[0];
  std::fill(bp.W_N.value().begin(), bp.W_N.value().end(), 0.0);
  sdit::Rng rng(5002);
  const int64_t N = c.num_patches(), D = c.hidden_dim;
  TD x_ffn = TD::randn({2, 2 * N, D}, rng, 1.0, false);
  ok = ok && bit_equal(m.reconstruction_apply(x_ffn, bp),
                       sdit::split(x_ffn, 1, {N, N})[0]);

  // the ablated path equals the W_N=0, W_D=0 frozen model exactly
  sdit::ModelConfig ca = c;
  ca.use_recon_module = false;
  ModelD ma = ModelD::init(ca, 5003);
  ModelD mb = ModelD::init(c, 5003);
  for (auto& blk : mb.blocks) {
    std::fill(blk.W_D.value().begin(), blk.W_D.value().end(), 0.0);
    std::fill(blk.W_N.value().begin(), blk.W_N.value().end(), 0.0);
  }
  TD x = TD::randn({2, 1, 8, 8}, rng, 1.0, false);
  ma.reset_states();
  mb.reset_states();
  ok = ok && bit_equal(ma.forward(x, 5), mb.forward(x, 5));
  report(5, "reconstruction identity (W_N=0) and ablation path", ok);
  CHECK(ok);
}

TEST_CASE("criterion 6: skip pairing for K in {1,2,4}") {
  bool ok = true;
  for (int64_t K : {int64_t(1), int64_t(2), int64_t(4)}) {
    sdit::ModelConfig c;
    c.image_size = 8;
    c.hidden_dim = 16;
    c.num_input_blocks = K;
    c.num_output_blocks = K;
    c.num_mid_blocks = 1;
    c.spike_steps = 1;
    ModelD m = ModelD::init(c, 6000 + K);
    sdit::Rng rng(6100 + K);
    TD x = TD::randn({1, 1, 8, 8}, rng, 1.0, false);
    for (int64_t tap = 0; tap < K; ++tap) {
      std::vector<TD> base(K), moved(K);
      sdit::ForwardProbe<double> p1;
      p1.on_skip_consume = [&](int64_t j, const TD& t) {
        base[j] = TD::from(t.shape(), t.value());
      };
      m.reset_states();
      (void)m.forward(x, 0, &p1);
      sdit::ForwardProbe<double> p2;
      p2.on_skip_store = [&](int64_t i, TD& t) {
        if (i == tap) t = sdit::add_scalar(t, 0.25);
      };
      p2.on_skip_consume = [&](int64_t j, const TD& t) {
        moved[j] = TD::from(t.shape(), t.value());
      };
      m.reset_states();
      (void)m.forward(x, 0, &p2);
      for (int64_t j = 0; j < K; ++j)
        if (bit_equal(base[j], moved[j]) == (j == K - 1 - tap)) ok = false;
    }
  }
  report(6, "skip pairing: input i -> output K-1-i (K=1,2,4)", ok);
  CHECK(ok);
}

TEST_CASE("criterion 7: schedule invariants and forward-noise variance") {
  auto s = sdit::make_schedule_linear(1000, 1e-4, 0.02);
  bool ok = true;
  for (int64_t t = 0; t < s.T_diff; ++t) {
    ok = ok && s.alpha_bar[t] > 0.0 && s.alpha_bar[t] < 1.0;
    if (t > 0) ok = ok && s.alpha_bar[t] < s.alpha_bar[t - 1];
  }
  auto s50 = sdit::make_schedule_linear(50, 1e-4, 0.02);
  sdit::Rng rng(7001);
  const int64_t n = 10000;
  TD zeros = TD::zeros({n});
  double worst = 0;
  for (int64_t t : {int64_t(5), int64_t(25), int64_t(49)}) {
    std::vector<double> e(n);
    for (auto& v : e) v = rng.normal();
    TD y = sdit::q_sample(zeros, t, TD::from({n}, std::move(e)), s50);
    double mu = 0, var = 0;
    for (double v : y.value()) mu += v;
    mu /= n;
    for (double v : y.value()) var += (v - mu) * (v - mu);
    var /= n;
    const double want = 1.0 - s50.alpha_bar[t];
    worst = std::max(worst, std::abs(var - want) / want);
  }
  ok = ok && worst < 0.03;
  report(7, "schedule invariants + Monte Carlo variance (3%)", ok,
         "worst rel dev " + std::to_string(worst));
  CHECK(ok);
}

TEST_CASE("criterion 8: desk-scale training halves the loss") {
  const auto t0 = std::chrono::steady_clock::now();
  auto dir = scratch("crit8");
  const std::string run = (dir / "run").string();
  const int rc = run_cli(
      "train --toy bars --size 8 --dim 32 --input-blocks 1 --mid-blocks 1"
      " --output-blocks 1 --spike-steps 2 --t-diff 50 --lr 1e-4 --seed 7"
      " --steps 500 --deterministic --run-dir " +
      run);
  REQUIRE(rc == 0);

  std::ifstream is(run + "/loss.csv");
  REQUIRE(bool(is));
  std::vector<double> losses;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty())
      losses.push_back(std::stod(line.substr(line.find(',') + 1)));
  REQUIRE(losses.size() == 500);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += losses[i];
    last += losses[450 + i];
  }
  first /= 50;
  last /= 50;
  const bool halved = last <= 0.5 * first;

  // sampling afterwards: finite values, valid PGM grid
  const int rs = run_cli("sample --ckpt " + run +
                         "/checkpoints/final.ckpt --n 16 --seed 1 --out-dir " +
                         (dir / "s").string());
  REQUIRE(rs == 0);
  auto grid = read_bytes(dir / "s" / "grid.pgm");
  const std::string header = "P5\n38 38\n255\n";  // 4x4 cells of 8px + 2px
  bool pgm_ok = grid.size() == header.size() + 38 * 38 &&
                std::string(grid.begin(), grid.begin() + header.size()) ==
                    header;
  auto raw = read_bytes(dir / "s" / "samples.bin");
  const size_t hdr = 4 + 4 * sizeof(uint32_t);  // magic + dims
  bool finite_ok = raw.size() == hdr + 16 * 64 * 8;
  if (finite_ok) {
    std::vector<double> vals(16 * 64);
    std::memcpy(vals.data(), raw.data() + hdr, vals.size() * 8);
    for (double v : vals) finite_ok = finite_ok && std::isfinite(v);
  }

  const double secs = elapsed_s(t0);
  const bool ok = halved && pgm_ok && finite_ok && secs < 600.0;
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "first50=%.3f last50=%.3f ratio=%.3f, %.0fs", first, last,
                last / first, secs);
  report(8, "training signal: last-50 mean <= 0.5 x first-50", ok, detail);
  CHECK(halved);
  CHECK(pgm_ok);
  CHECK(finite_ok);
  CHECK(secs < 600.0);
}

TEST_CASE("criterion 9: two identical runs are byte-identical") {
  auto dir = scratch("crit9");
  const std::string common =
      "train --toy bars --size 8 --dim 16 --input-blocks 1 --mid-blocks 1"
      " --output-blocks 1 --spike-steps 2 --t-diff 20 --batch 8"
      " --toy-count 64 --steps 60 --seed 21 --deterministic --run-dir ";
  REQUIRE(run_cli(common + (dir / "a").string()) == 0);
  REQUIRE(run_cli(common + (dir / "b").string()) == 0);
  bool ok = read_bytes(dir / "a" / "loss.csv") ==
            read_bytes(dir / "b" / "loss.csv");
  ok = ok && read_bytes(dir / "a" / "checkpoints" / "final.ckpt") ==
                 read_bytes(dir / "b" / "checkpoints" / "final.ckpt");

  const std::string samp = "sample --ckpt " + (dir / "a").string() +
                           "/checkpoints/final.ckpt --n 6 --cols 3 --seed 4"
                           " --deterministic --out-dir ";
  REQUIRE(run_cli(samp + (dir / "s1").string()) == 0);
  REQUIRE(run_cli(samp + (dir / "s2").string()) == 0);
  ok = ok && read_bytes(dir / "s1" / "grid.pgm") ==
                 read_bytes(dir / "s2" / "grid.pgm");
  ok = ok && read_bytes(dir / "s1" / "samples.bin") ==
                 read_bytes(dir / "s2" / "samples.bin");
  report(9, "determinism: loss.csv, checkpoint, samples byte-equal", ok);
  CHECK(ok);
}

TEST_CASE("criterion 10: counting report") {
  // exact hand tally on a one-block toy config
  sdit::ModelConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.hidden_dim = 6;
  c.num_input_blocks = 1;
  c.num_mid_blocks = 0;
  c.num_output_blocks = 1;
  c.spike_steps = 1;
  c.d_ff_mult = 2;
  auto r = sdit::count_params_macs(c);
  const int64_t D = 6, N = 4, F = 4, Dff = 12;
  int64_t hand = 0;
  hand += 4 * D * D + 2 * D + 3 * D;
  hand += D * D + D * Dff + Dff * D + 2 * D;
  hand += 4 * D;
  hand += D * N + N * D + N * D;
  hand *= 2;
  hand += 2 * D * D;
  hand += F * D + D;
  hand += N * D;
  hand += 2 * (D * D + D);
  hand += D * F + F;
  hand += 10;
  bool ok = r.params == hand;

  // live parameters agree with the analytic tally
  ModelD m = ModelD::init(c, 424242);
  int64_t live = 0;
  for (auto& [_, p] : m.named_params()) live += p.numel();
  ok = ok && live == r.params;

  // paper preset prints alongside the published reference sizes
  const fs::path log = scratch("crit10") / "count.log";
  const std::string cmd = std::string(SDIT_CLI_PATH) +
                          " count --preset mnist-paper > " + log.string() +
                          " 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  std::ifstream is(log);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  ok = ok && text.find("11698958") != std::string::npos;
  ok = ok && text.find("11.67 M") != std::string::npos;
  ok = ok && text.find("1.32 G") != std::string::npos;
  report(10, "param/MAC tally exact; preset printed vs reference", ok);
  CHECK(ok);
}

TEST_CASE("criterion 11: IDX mapping round trip and malformed headers") {
  bool ok = true;
  for (int p = 0; p < 256; ++p)
    ok = ok && sdit::unit_to_pixel(sdit::pixel_to_unit(uint8_t(p))) == p;

  auto dir = scratch("crit11");
  auto write_file = [&](const char* name, const std::vector<uint8_t>& b) {
    std::ofstream os(dir / name, std::ios::binary);
    os.write(reinterpret_cast<const char*>(b.data()), b.size());
  };
  auto be32 = [](std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x >> 24));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x));
  };
  std::vector<uint8_t> wrong;
  be32(wrong, 0x00000801);
  be32(wrong, 1);
  write_file("wrong.idx", wrong);
  try {
    sdit::load_idx((dir / "wrong.idx").string());
    ok = false;
  } catch (const sdit::BadMagic&) {
  }
  std::vector<uint8_t> trunc;
  be32(trunc, 0x00000803);
  be32(trunc, 5);
  be32(trunc, 28);
  be32(trunc, 28);
  trunc.insert(trunc.end(), 11, 0);
  write_file("trunc.idx", trunc);
  try {
    sdit::load_idx((dir / "trunc.idx").string());
    ok = false;
  } catch (const sdit::TruncatedFile&) {
  }
  report(11, "IDX normalization round trip + header errors", ok);
  CHECK(ok);
}
