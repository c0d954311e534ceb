#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdit/errors.hpp"
#include "sdit/rng.hpp"
#include "sdit/rwkv.hpp"
#include "sdit/spiking.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

struct ModelConfig {
  int64_t image_size = 8;
  int64_t channels = 1;
  int64_t patch_size = 2;
  int64_t hidden_dim = 32;
  int64_t num_input_blocks = 1;
  int64_t num_mid_blocks = 1;
  int64_t num_output_blocks = 1;
  int64_t spike_steps = 2;
  int64_t d_ff_mult = 4;
  int64_t max_diffusion_step = 1000;
  bool use_recon_module = true;
  LifConfig lif;

  void validate() const {
    if (hidden_dim < 1) throw BadParam("config: hidden_dim must be positive");
    if (image_size < 1 || channels < 1 || patch_size < 1)
      throw BadParam("config: bad geometry");
    if (image_size % patch_size != 0)
      throw BadParam("config: image_size must be divisible by patch_size");
    if (num_output_blocks != num_input_blocks)
      throw BadParam("config: output blocks must pair with input blocks");
    if (num_input_blocks < 1 || num_mid_blocks < 0)
      throw BadParam("config: need at least one input block");
    if (spike_steps < 1) throw BadParam("config: spike_steps must be >= 1");
    if (d_ff_mult < 1) throw BadParam("config: d_ff_mult must be >= 1");
    if (max_diffusion_step < 1)
      throw BadParam("config: max_diffusion_step must be >= 1");
    lif.validate();
  }

  int64_t grid() const { return image_size / patch_size; }
  int64_t num_patches() const { return grid() * grid(); }
  int64_t patch_dim() const { return patch_size * patch_size * channels; }
  int64_t d_ff() const { return d_ff_mult * hidden_dim; }
  int64_t num_blocks() const {
    return num_input_blocks + num_mid_blocks + num_output_blocks;
  }

  // Canonical key-sorted text; checkpoint compatibility compares this.
  std::string canonical_text() const {
    std::string s;
    auto kv = [&](const std::string& k, const std::string& v) {
      s += k + " = " + v + "\n";
    };
    kv("channels", std::to_string(channels));
    kv("d_ff_mult", std::to_string(d_ff_mult));
    kv("hidden_dim", std::to_string(hidden_dim));
    kv("image_size", std::to_string(image_size));
    kv("lif.surrogate_alpha", format_double(lif.surrogate_alpha));
    kv("lif.tau", format_double(lif.tau));
    kv("lif.v_reset", format_double(lif.v_reset));
    kv("lif.v_threshold", format_double(lif.v_threshold));
    kv("max_diffusion_step", std::to_string(max_diffusion_step));
    kv("num_input_blocks", std::to_string(num_input_blocks));
    kv("num_mid_blocks", std::to_string(num_mid_blocks));
    kv("num_output_blocks", std::to_string(num_output_blocks));
    kv("patch_size", std::to_string(patch_size));
    kv("spike_steps", std::to_string(spike_steps));
    kv("use_recon_module", use_recon_module ? "1" : "0");
    return s;
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::map<std::string, std::string> kv;
    size_t pos = 0;
    while (pos < text.size()) {
      size_t eol = text.find('\n', pos);
      if (eol == std::string::npos) eol = text.size();
      const std::string line = text.substr(pos, eol - pos);
      pos = eol + 1;
      const size_t eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    auto geti = [&](const char* k, int64_t& out) {
      auto it = kv.find(k);
      if (it == kv.end()) throw ConfigMismatch(std::string("config: missing ") + k);
      out = std::stoll(it->second);
    };
    auto getd = [&](const char* k, double& out) {
      auto it = kv.find(k);
      if (it == kv.end()) throw ConfigMismatch(std::string("config: missing ") + k);
      out = std::stod(it->second);
    };
    geti("channels", c.channels);
    geti("d_ff_mult", c.d_ff_mult);
    geti("hidden_dim", c.hidden_dim);
    geti("image_size", c.image_size);
    getd("lif.surrogate_alpha", c.lif.surrogate_alpha);
    getd("lif.tau", c.lif.tau);
    getd("lif.v_reset", c.lif.v_reset);
    getd("lif.v_threshold", c.lif.v_threshold);
    geti("max_diffusion_step", c.max_diffusion_step);
    geti("num_input_blocks", c.num_input_blocks);
    geti("num_mid_blocks", c.num_mid_blocks);
    geti("num_output_blocks", c.num_output_blocks);
    geti("patch_size", c.patch_size);
    geti("spike_steps", c.spike_steps);
    int64_t recon = 1;
    geti("use_recon_module", recon);
    c.use_recon_module = recon != 0;
    c.validate();
    return c;
  }
};

// Test/verification hooks threaded through a forward pass.
template <class T>
struct ForwardProbe {
  std::function<void(const Tensor<T>&)> on_spikes;
  // may replace the tensor recorded for input block i's skip
  std::function<void(int64_t, Tensor<T>&)> on_skip_store;
  std::function<void(int64_t, const Tensor<T>&)> on_skip_consume;
  std::function<void(int64_t, const Tensor<T>&)> on_step_output;
};

template <class T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  TimeMixParams<T> tmix;
  ChannelMixParams<T> cmix;
  Tensor<T> W_D;  // D x N
  Tensor<T> W_N;  // N x D
  Tensor<T> z;    // reconstruction token, N x D
  Tensor<T> W_skip;  // 2D x D, output blocks only
  LifState<T> lif1, lif2;

  bool has_skip() const { return W_skip.defined(); }
  int64_t token_count() const { return z.dim(0); }  // N

  static BlockParams init(int64_t D, int64_t N, int64_t D_ff, Rng& rng,
                          bool with_skip, bool zero_recon) {
    BlockParams bp;
    bp.ln1_g = Tensor<T>::param({D}, std::vector<T>(D, T(1)));
    bp.ln1_b = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    bp.ln2_g = Tensor<T>::param({D}, std::vector<T>(D, T(1)));
    bp.ln2_b = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    bp.tmix = TimeMixParams<T>::init(D, rng);
    bp.cmix = ChannelMixParams<T>::init(D, D_ff, rng);
    // Near-zero start: the module opens as the identity y ~= y'.
    bp.W_D = Tensor<T>::randn({D, N}, rng, 1e-3, true);
    bp.W_N = Tensor<T>::randn({N, D}, rng, 1e-3, true);
    bp.z = Tensor<T>::randn({N, D}, rng, 0.02, true);
    if (zero_recon) {
      // Draws above keep the rng stream aligned with the default model.
      std::fill(bp.W_D.value().begin(), bp.W_D.value().end(), T(0));
      std::fill(bp.W_N.value().begin(), bp.W_N.value().end(), T(0));
    }
    if (with_skip)
      bp.W_skip =
          Tensor<T>::randn({2 * D, D}, rng, 1.0 / std::sqrt(double(2 * D)),
                           true);
    return bp;
  }
};

template <class T>
struct SditModel {
  ModelConfig cfg;
  Tensor<T> patch_proj_w, patch_proj_b;
  Tensor<T> pos_embed;
  Tensor<T> tmlp_w1, tmlp_b1, tmlp_w2, tmlp_b2;
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_w, final_b;
  Tensor<T> conv_w, conv_b;

  static constexpr double kLnEps = 1e-5;

  static SditModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    SditModel m;
    m.cfg = cfg;
    Rng rng(seed);
    const int64_t D = cfg.hidden_dim;
    const int64_t N = cfg.num_patches();
    const int64_t F = cfg.patch_dim();
    const int64_t C = cfg.channels;

    m.patch_proj_w = Tensor<T>::randn({F, D}, rng, 1.0 / std::sqrt(double(F)), true);
    m.patch_proj_b = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    m.pos_embed = Tensor<T>::randn({N, D}, rng, 0.02, true);
    m.tmlp_w1 = Tensor<T>::randn({D, D}, rng, 1.0 / std::sqrt(double(D)), true);
    m.tmlp_b1 = Tensor<T>::param({D}, std::vector<T>(D, T(0)));
    m.tmlp_w2 = Tensor<T>::randn({D, D}, rng, 1.0 / std::sqrt(double(D)), true);
    m.tmlp_b2 = Tensor<T>::param({D}, std::vector<T>(D, T(0)));

    for (int64_t i = 0; i < cfg.num_blocks(); ++i) {
      const bool is_output = i >= cfg.num_input_blocks + cfg.num_mid_blocks;
      m.blocks.push_back(BlockParams<T>::init(D, N, cfg.d_ff(), rng,
                                              is_output,
                                              !cfg.use_recon_module));
    }

    m.final_w = Tensor<T>::randn({D, F}, rng, 1.0 / std::sqrt(double(D)), true);
    m.final_b = Tensor<T>::param({F}, std::vector<T>(F, T(0)));
    // Zero-initialized residual conv keeps the initial prediction on the
    // linear path.
    m.conv_w = Tensor<T>::param({C, C, 3, 3},
                                std::vector<T>(C * C * 9, T(0)));
    m.conv_b = Tensor<T>::param({C}, std::vector<T>(C, T(0)));
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> v;
    v.emplace_back("patch_proj.weight", patch_proj_w);
    v.emplace_back("patch_proj.bias", patch_proj_b);
    v.emplace_back("pos_embed", pos_embed);
    v.emplace_back("time_mlp.fc1.weight", tmlp_w1);
    v.emplace_back("time_mlp.fc1.bias", tmlp_b1);
    v.emplace_back("time_mlp.fc2.weight", tmlp_w2);
    v.emplace_back("time_mlp.fc2.bias", tmlp_b2);
    for (size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "block" + std::to_string(i) + ".";
      v.emplace_back(p + "ln1.gamma", b.ln1_g);
      v.emplace_back(p + "ln1.beta", b.ln1_b);
      v.emplace_back(p + "ln2.gamma", b.ln2_g);
      v.emplace_back(p + "ln2.beta", b.ln2_b);
      v.emplace_back(p + "tmix.W_r", b.tmix.W_r);
      v.emplace_back(p + "tmix.W_k", b.tmix.W_k);
      v.emplace_back(p + "tmix.W_v", b.tmix.W_v);
      v.emplace_back(p + "tmix.W_o", b.tmix.W_o);
      v.emplace_back(p + "tmix.w_raw", b.tmix.w_raw);
      v.emplace_back(p + "tmix.u", b.tmix.u);
      v.emplace_back(p + "tmix.mu_r", b.tmix.mu_r);
      v.emplace_back(p + "tmix.mu_k", b.tmix.mu_k);
      v.emplace_back(p + "tmix.mu_v", b.tmix.mu_v);
      v.emplace_back(p + "cmix.W_r", b.cmix.W_r);
      v.emplace_back(p + "cmix.W_k", b.cmix.W_k);
      v.emplace_back(p + "cmix.W_v", b.cmix.W_v);
      v.emplace_back(p + "cmix.mu_r", b.cmix.mu_r);
      v.emplace_back(p + "cmix.mu_k", b.cmix.mu_k);
      v.emplace_back(p + "recon.W_D", b.W_D);
      v.emplace_back(p + "recon.W_N", b.W_N);
      v.emplace_back(p + "recon.z", b.z);
      if (b.has_skip()) v.emplace_back(p + "W_skip", b.W_skip);
    }
    v.emplace_back("final.weight", final_w);
    v.emplace_back("final.bias", final_b);
    v.emplace_back("final_conv.weight", conv_w);
    v.emplace_back("final_conv.bias", conv_b);
    return v;
  }

  // Trainable subset; the ablated reconstruction matrices stay frozen at 0.
  std::vector<std::pair<std::string, Tensor<T>>> trainable_params() const {
    auto all = named_params();
    if (cfg.use_recon_module) return all;
    std::vector<std::pair<std::string, Tensor<T>>> v;
    for (auto& kv : all) {
      const bool frozen = kv.first.find("recon.W_") != std::string::npos;
      if (!frozen) v.push_back(kv);
    }
    return v;
  }

  void zero_grads() const {
    for (auto& [_, p] : named_params())
      std::fill(p.grad().begin(), p.grad().end(), T(0));
  }

  void reset_states() {
    for (auto& b : blocks) {
      b.lif1.clear();
      b.lif2.clear();
    }
  }

  void copy_params_from(const SditModel& other) {
    auto dst = named_params();
    auto src = other.named_params();
    for (size_t i = 0; i < dst.size(); ++i)
      dst[i].second.value() = src[i].second.value();
  }

  Tensor<T> patch_embed(const Tensor<T>& x) const {
    Tensor<T> tokens =
        add(matmul(unfold_patches(x, cfg.patch_size), patch_proj_w),
            patch_proj_b);
    return add(tokens, pos_embed);
  }

  // Sinusoidal frequency encoding of the diffusion step, then a 2-layer MLP.
  Tensor<T> timestep_embed(int64_t t) const {
    if (t < 0 || t >= cfg.max_diffusion_step)
      throw OutOfRange("timestep_embed: t=" + std::to_string(t) +
                       " outside [0," + std::to_string(cfg.max_diffusion_step) +
                       ")");
    const int64_t D = cfg.hidden_dim;
    const int64_t half = D / 2;
    std::vector<T> enc(D, T(0));
    for (int64_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * double(i) / double(half));
      enc[i] = static_cast<T>(std::sin(double(t) * freq));
      enc[half + i] = static_cast<T>(std::cos(double(t) * freq));
    }
    Tensor<T> e = Tensor<T>::from({1, D}, std::move(enc));
    Tensor<T> h = silu(add(matmul(e, tmlp_w1), tmlp_b1));
    return add(matmul(h, tmlp_w2), tmlp_b2);  // [1, D]
  }

  Tensor<T> skip_merge(const Tensor<T>& x, const Tensor<T>* x_skip,
                       const BlockParams<T>& bp) const {
    if (!x_skip) return x;
    if (x_skip->shape() != x.shape())
      throw ShapeMismatch("skip_merge: " + shape_str(x.shape()) + " vs " +
                          shape_str(x_skip->shape()));
    return matmul(concat<T>({x, *x_skip}, 2), bp.W_skip);
  }

  // split at N, z' -> W_D -> swap -> W_N, then multiplicative-plus-additive
  // correction of the patch stream.
  Tensor<T> reconstruction_apply(const Tensor<T>& x_ffn,
                                 const BlockParams<T>& bp) const {
    const int64_t N = bp.token_count();
    if (x_ffn.dim(1) != 2 * N)
      throw ShapeMismatch("reconstruction_apply: token axis " +
                          std::to_string(x_ffn.dim(1)) + " != 2N");
    auto parts = split(x_ffn, 1, {N, N});
    Tensor<T> y_prime = parts[0];
    if (!cfg.use_recon_module) return y_prime;
    Tensor<T> zD = matmul(parts[1], bp.W_D);          // [B,N,N]
    Tensor<T> zN = matmul(transpose(zD), bp.W_N);     // [B,N,D]
    return add(y_prime, mul(zN, y_prime));
  }

  Tensor<T> block_forward(const Tensor<T>& x, const Tensor<T>* x_skip,
                          BlockParams<T>& bp,
                          const ForwardProbe<T>* probe = nullptr) {
    Tensor<T> h = skip_merge(x, x_skip, bp);
    Tensor<T> zt = tile0(bp.z, h.dim(0));
    Tensor<T> hcat = concat<T>({h, zt}, 1);  // [B,2N,D]
    Tensor<T> a =
        time_mixing(layer_norm(hcat, bp.ln1_g, bp.ln1_b, T(kLnEps)), bp.tmix);
    Tensor<T> s1 = lif_step(a, bp.lif1, cfg.lif);
    if (probe && probe->on_spikes) probe->on_spikes(s1);
    Tensor<T> x_attn = add(hcat, s1);
    Tensor<T> c = channel_mixing(
        layer_norm(x_attn, bp.ln2_g, bp.ln2_b, T(kLnEps)), bp.cmix);
    Tensor<T> s2 = lif_step(c, bp.lif2, cfg.lif);
    if (probe && probe->on_spikes) probe->on_spikes(s2);
    Tensor<T> x_ffn = add(x_attn, s2);
    return reconstruction_apply(x_ffn, bp);
  }

  Tensor<T> final_layer(const Tensor<T>& tokens) const {
    Tensor<T> lin = add(matmul(tokens, final_w), final_b);
    Tensor<T> img = fold_patches(lin, cfg.channels, cfg.image_size,
                                 cfg.image_size, cfg.patch_size);
    return add(img, conv3x3(img, conv_w, conv_b));
  }

  // Full pass: embeddings once, then spike_steps stateful traversals of the
  // blocks and final layer, rate-decoded by averaging. Skip wiring is
  // U-ViT style: input block i feeds output block (K-1-i).
  Tensor<T> forward(const Tensor<T>& x, int64_t t,
                    const ForwardProbe<T>* probe = nullptr) {
    if (x.rank() != 4 || x.dim(1) != cfg.channels ||
        x.dim(2) != cfg.image_size || x.dim(3) != cfg.image_size)
      throw ShapeMismatch("forward: input " + shape_str(x.shape()));
    for (const auto& b : blocks)
      if (b.lif1.step_index != 0 || b.lif2.step_index != 0)
        throw StaleState("forward: LIF states not reset");

    Tensor<T> tokens = patch_embed(x);
    Tensor<T> temb = reshape(timestep_embed(t), {cfg.hidden_dim});
    tokens = add(tokens, temb);

    const int64_t K = cfg.num_input_blocks;
    const int64_t M = cfg.num_mid_blocks;
    Tensor<T> acc;
    for (int64_t s = 0; s < cfg.spike_steps; ++s) {
      Tensor<T> h = tokens;
      std::vector<Tensor<T>> skips;
      int64_t bi = 0;
      for (int64_t i = 0; i < K; ++i, ++bi) {
        h = block_forward(h, nullptr, blocks[bi], probe);
        Tensor<T> stored = h;
        if (probe && probe->on_skip_store) probe->on_skip_store(i, stored);
        skips.push_back(stored);
      }
      for (int64_t i = 0; i < M; ++i, ++bi)
        h = block_forward(h, nullptr, blocks[bi], probe);
      for (int64_t j = 0; j < K; ++j, ++bi) {
        const Tensor<T>& sk = skips[K - 1 - j];
        if (probe && probe->on_skip_consume) probe->on_skip_consume(j, sk);
        h = block_forward(h, &sk, blocks[bi], probe);
      }
      Tensor<T> img = final_layer(h);
      if (probe && probe->on_step_output) probe->on_step_output(s, img);
      acc = acc.defined() ? add(acc, img) : img;
    }
    return mul_scalar(acc, T(1) / static_cast<T>(cfg.spike_steps));
  }
};

// ---------------------------------------------------------------------------
// Analytic parameter and MAC tallies. MACs count matmul/conv multiply-
// accumulates for one item (B=1); elementwise work (LIF, token shift, WKV
// state updates, norms, gates) is excluded, matching the usual convention.

struct CostReport {
  int64_t params = 0;
  int64_t embed_macs = 0;      // counted once per forward (ANN side)
  int64_t per_step_macs = 0;   // blocks + final layer, once per spike step
  int64_t total_macs(int64_t T) const { return embed_macs + T * per_step_macs; }
};

inline CostReport count_params_macs(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t D = cfg.hidden_dim;
  const int64_t N = cfg.num_patches();
  const int64_t L = 2 * N;  // tokens after the reconstruction-token concat
  const int64_t F = cfg.patch_dim();
  const int64_t Dff = cfg.d_ff();
  const int64_t C = cfg.channels;
  const int64_t HW = cfg.image_size * cfg.image_size;

  CostReport r;
  // params
  const int64_t tmix_p = 4 * D * D + 2 * D + 3 * D;
  const int64_t cmix_p = D * D + D * Dff + Dff * D + 2 * D;
  const int64_t ln_p = 4 * D;
  const int64_t recon_p = D * N + N * D + N * D;  // W_D, W_N, z
  const int64_t block_p = tmix_p + cmix_p + ln_p + recon_p;
  r.params = cfg.num_blocks() * block_p;
  r.params += cfg.num_output_blocks * (2 * D) * D;  // W_skip
  r.params += F * D + D;            // patch projection
  r.params += N * D;                // position table
  r.params += 2 * (D * D + D);      // time MLP
  r.params += D * F + F;            // final linear
  r.params += C * C * 9 + C;        // final conv

  // embeddings, once
  r.embed_macs = N * F * D + 2 * D * D;

  // per spike step: every block plus the final layer
  const int64_t tmix_m = 4 * L * D * D;
  const int64_t cmix_m = L * D * D + L * D * Dff + L * Dff * D;
  const int64_t recon_m = cfg.use_recon_module ? (N * D * N + N * N * D) : 0;
  const int64_t block_m = tmix_m + cmix_m + recon_m;
  r.per_step_macs = cfg.num_blocks() * block_m;
  r.per_step_macs += cfg.num_output_blocks * N * (2 * D) * D;  // skip merge
  r.per_step_macs += N * D * F;      // final linear
  r.per_step_macs += HW * C * C * 9; // conv
  return r;
}

}  // namespace sdit
