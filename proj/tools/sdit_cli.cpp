// sdit: train, sample, verify and count the spiking diffusion transformer.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 runtime numeric error.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "sdit/checkpoint_io.hpp"
#include "sdit/data_io.hpp"
#include "sdit/diffusion.hpp"
#include "sdit/model.hpp"
#include "sdit/rwkv.hpp"
#include "sdit/selfcheck.hpp"

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Flag/config-file binding. Every option is declared once; the same table
// serves the CLI flags, the `key = value` config file (unknown keys
// rejected, command line wins) and the canonical effective-config echo.

struct Binder {
  CLI::App* cmd;
  struct Key {
    std::string name;
    char kind;  // i, d, s, b
    void* ptr;
  };
  std::vector<Key> keys;
  std::string config_path;

  explicit Binder(CLI::App* c) : cmd(c) {
    cmd->add_option("--config", config_path,
                    "key = value file; explicit flags win");
  }

  void opt(const std::string& n, int64_t& v, const std::string& d) {
    cmd->add_option("--" + n, v, d);
    keys.push_back({n, 'i', &v});
  }
  void opt(const std::string& n, double& v, const std::string& d) {
    cmd->add_option("--" + n, v, d);
    keys.push_back({n, 'd', &v});
  }
  void opt(const std::string& n, std::string& v, const std::string& d) {
    cmd->add_option("--" + n, v, d);
    keys.push_back({n, 's', &v});
  }
  void flag(const std::string& n, bool& v, const std::string& d) {
    cmd->add_flag("--" + n, v, d);
    keys.push_back({n, 'b', &v});
  }

  bool cli_given(const std::string& n) const {
    return cmd->count("--" + n) > 0;
  }

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  // Returns the set of keys the config file provided.
  std::vector<std::string> apply_config_file() {
    std::vector<std::string> given;
    if (config_path.empty()) return given;
    std::ifstream is(config_path);
    if (!is) throw sdit::IoError("config: cannot open " + config_path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos)
        line = line.substr(0, h);
      line = trim(line);
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw sdit::BadParam("config: line " + std::to_string(lineno) +
                             " is not `key = value`");
      const std::string k = trim(line.substr(0, eq));
      const std::string v = trim(line.substr(eq + 1));
      Key* found = nullptr;
      for (auto& key : keys)
        if (key.name == k) found = &key;
      if (!found) throw sdit::BadParam("config: unknown key '" + k + "'");
      given.push_back(k);
      if (cli_given(k)) continue;  // command line beats the file
      switch (found->kind) {
        case 'i':
          *static_cast<int64_t*>(found->ptr) = std::stoll(v);
          break;
        case 'd':
          *static_cast<double*>(found->ptr) = std::stod(v);
          break;
        case 's':
          *static_cast<std::string*>(found->ptr) = v;
          break;
        case 'b':
          *static_cast<bool*>(found->ptr) =
              (v == "1" || v == "true" || v == "yes");
          break;
      }
    }
    return given;
  }

  std::string echo() const {
    std::vector<const Key*> sorted;
    for (const auto& k : keys) sorted.push_back(&k);
    std::sort(sorted.begin(), sorted.end(),
              [](const Key* a, const Key* b) { return a->name < b->name; });
    std::string s;
    for (const Key* k : sorted) {
      s += k->name + " = ";
      switch (k->kind) {
        case 'i':
          s += std::to_string(*static_cast<const int64_t*>(k->ptr));
          break;
        case 'd':
          s += sdit::format_double(*static_cast<const double*>(k->ptr));
          break;
        case 's':
          s += *static_cast<const std::string*>(k->ptr);
          break;
        case 'b':
          s += *static_cast<const bool*>(k->ptr) ? "1" : "0";
          break;
      }
      s += "\n";
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Shared model flags.

struct ModelFlags {
  int64_t size = 8;
  int64_t channels = 1;
  int64_t patch = 2;
  int64_t dim = 32;
  int64_t input_blocks = 1;
  int64_t mid_blocks = 1;
  int64_t output_blocks = 1;
  int64_t spike_steps = 2;
  int64_t dff_mult = 4;
  double tau = 2.0;
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_alpha = 2.0;
  bool no_recon_module = false;
  std::string preset;

  void bind(Binder& b) {
    b.opt("size", size, "image height/width");
    b.opt("channels", channels, "image channels");
    b.opt("patch", patch, "patch size");
    b.opt("dim", dim, "hidden dimension");
    b.opt("input-blocks", input_blocks, "input block count");
    b.opt("mid-blocks", mid_blocks, "mid block count");
    b.opt("output-blocks", output_blocks, "output block count");
    b.opt("spike-steps", spike_steps, "spiking time steps");
    b.opt("dff-mult", dff_mult, "channel-mix width multiplier");
    b.opt("tau", tau, "LIF membrane time constant");
    b.opt("v-threshold", v_threshold, "LIF firing threshold");
    b.opt("v-reset", v_reset, "LIF reset potential");
    b.opt("surrogate-alpha", surrogate_alpha, "surrogate sharpness");
    b.flag("no-recon-module", no_recon_module,
           "zero and freeze the Reconstruction Module");
    b.opt("preset", preset, "desk | mnist-paper | cifar-paper");
  }

  // Preset values apply only where the user said nothing.
  void apply_preset(const Binder& b, const std::vector<std::string>& cfg_keys) {
    if (preset.empty()) return;
    auto given = [&](const std::string& k) {
      if (b.cli_given(k)) return true;
      for (const auto& c : cfg_keys)
        if (c == k) return true;
      return false;
    };
    auto set = [&](const std::string& k, int64_t& field, int64_t v) {
      if (!given(k)) field = v;
    };
    if (preset == "desk") {
      set("size", size, 8);
      set("channels", channels, 1);
      set("patch", patch, 2);
      set("dim", dim, 32);
      set("input-blocks", input_blocks, 1);
      set("mid-blocks", mid_blocks, 1);
      set("output-blocks", output_blocks, 1);
      set("spike-steps", spike_steps, 2);
    } else if (preset == "mnist-paper") {
      set("size", size, 28);
      set("channels", channels, 1);
      set("patch", patch, 2);
      set("dim", dim, 384);
      set("input-blocks", input_blocks, 2);
      set("mid-blocks", mid_blocks, 1);
      set("output-blocks", output_blocks, 2);
      set("spike-steps", spike_steps, 4);
    } else if (preset == "cifar-paper") {
      set("size", size, 32);
      set("channels", channels, 3);
      set("patch", patch, 2);
      set("dim", dim, 512);
      set("input-blocks", input_blocks, 4);
      set("mid-blocks", mid_blocks, 1);
      set("output-blocks", output_blocks, 4);
      set("spike-steps", spike_steps, 4);
    } else {
      throw sdit::BadParam("unknown preset '" + preset + "'");
    }
  }

  sdit::ModelConfig to_config(int64_t t_diff) const {
    sdit::ModelConfig c;
    c.image_size = size;
    c.channels = channels;
    c.patch_size = patch;
    c.hidden_dim = dim;
    c.num_input_blocks = input_blocks;
    c.num_mid_blocks = mid_blocks;
    c.num_output_blocks = output_blocks;
    c.spike_steps = spike_steps;
    c.d_ff_mult = dff_mult;
    c.max_diffusion_step = t_diff;
    c.use_recon_module = !no_recon_module;
    c.lif.tau = tau;
    c.lif.v_threshold = v_threshold;
    c.lif.v_reset = v_reset;
    c.lif.surrogate_alpha = surrogate_alpha;
    c.validate();
    return c;
  }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw sdit::IoError("cannot write " + p.string());
  os << text;
}

void append_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::app);
  if (!os) throw sdit::IoError("cannot append to " + p.string());
  os << text;
}

// Raw tensor dump: 'SDTR', four u32 LE dims, f64 LE payload.
void write_raw_dump(const fs::path& p, const std::vector<double>& v,
                    int64_t n, int64_t C, int64_t H, int64_t W) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw sdit::IoError("cannot write " + p.string());
  os.write("SDTR", 4);
  uint32_t dims[4] = {uint32_t(n), uint32_t(C), uint32_t(H), uint32_t(W)};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  os.write(reinterpret_cast<const char*>(v.data()), v.size() * 8);
}

// ---------------------------------------------------------------------------
// train

struct TrainSettings {
  ModelFlags model;
  std::string toy;  // bars | blobs | empty
  std::string images, labels;
  int64_t toy_count = 256;
  int64_t steps = 200;
  int64_t batch = 32;
  double lr = 1e-4;
  double weight_decay = 0.01;
  int64_t seed = 7;
  std::string run_dir = "run";
  int64_t log_interval = 1;
  int64_t ckpt_interval = 0;
  int64_t t_diff = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool deterministic = false;
  std::string precision = "f64";
  int64_t jobs = 1;
};

template <class T>
int run_train(const TrainSettings& s, const sdit::Dataset& ds,
              const std::string& echo) {
  sdit::ModelConfig cfg = s.model.to_config(s.t_diff);
  cfg.image_size = ds.height;
  cfg.channels = ds.channels;
  cfg.validate();

  fs::create_directories(fs::path(s.run_dir) / "checkpoints");
  fs::create_directories(fs::path(s.run_dir) / "samples");
  write_text(fs::path(s.run_dir) / "config.txt", echo);
  const fs::path loss_csv = fs::path(s.run_dir) / "loss.csv";
  write_text(loss_csv, "");

  auto model = sdit::SditModel<T>::init(cfg, uint64_t(s.seed));
  sdit::AdamW<T> opt(model.trainable_params());
  opt.lr = s.lr;
  opt.weight_decay = s.weight_decay;
  auto sched = sdit::make_schedule_linear(s.t_diff, s.beta_start, s.beta_end);
  sdit::Rng rng(uint64_t(s.seed) + 1);

  const int64_t jobs = s.deterministic ? 1 : std::max<int64_t>(1, s.jobs);
  std::vector<sdit::SditModel<T>> workers;
  for (int64_t j = 1; j < jobs; ++j)
    workers.push_back(sdit::SditModel<T>::init(cfg, uint64_t(s.seed)));

  int64_t step = 0;
  try {
    for (step = 1; step <= s.steps; ++step) {
      auto batch = sdit::draw_batch<T>(ds, s.batch, rng);
      double loss;
      if (workers.empty()) {
        opt.zero_grads();
        loss = sdit::loss_step(batch, model, sched, rng);
      } else {
        loss = sdit::loss_step_parallel(batch, model, workers, sched, rng);
      }
      opt.step();
      if (step % s.log_interval == 0)
        append_text(loss_csv, std::to_string(step) + "," +
                                  sdit::format_double(loss) + "\n");
      if (s.ckpt_interval > 0 && step % s.ckpt_interval == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "step_%06" PRId64 ".ckpt", step);
        sdit::save_checkpoint(
            (fs::path(s.run_dir) / "checkpoints" / name).string(),
            sdit::make_checkpoint(model, &opt, uint64_t(step),
                                  rng.state_text()));
      }
    }
  } catch (const sdit::NonFinite& e) {
    std::cerr << "numeric failure at step " << step << ": " << e.what()
              << "\n";
    return 3;
  }
  sdit::save_checkpoint(
      (fs::path(s.run_dir) / "checkpoints" / "final.ckpt").string(),
      sdit::make_checkpoint(model, &opt, uint64_t(s.steps), rng.state_text()));
  std::cout << "trained " << s.steps << " steps; final checkpoint at "
            << (fs::path(s.run_dir) / "checkpoints" / "final.ckpt").string()
            << "\n";
  return 0;
}

int cmd_train(TrainSettings& s, Binder& binder) {
  auto cfg_keys = binder.apply_config_file();
  s.model.apply_preset(binder, cfg_keys);
  const std::string echo = binder.echo();
  std::cout << echo;

  if (s.toy.empty() && s.images.empty())
    throw sdit::BadParam(
        "train: no dataset; pass --toy bars|blobs or --images <idx file>");
  if (!s.toy.empty() && !s.images.empty())
    throw sdit::BadParam("train: --toy and --images are mutually exclusive");
  if (s.steps < 1) throw sdit::BadParam("train: --steps must be >= 1");
  if (s.log_interval < 1)
    throw sdit::BadParam("train: --log-interval must be >= 1");
  if (s.precision != "f32" && s.precision != "f64")
    throw sdit::BadParam("train: --precision must be f32 or f64");

  sdit::Dataset ds;
  if (!s.toy.empty()) {
    sdit::ToyKind kind;
    if (s.toy == "bars")
      kind = sdit::ToyKind::bars;
    else if (s.toy == "blobs")
      kind = sdit::ToyKind::blobs;
    else
      throw sdit::BadParam("train: --toy must be bars or blobs");
    ds = sdit::gen_toy_dataset(kind, s.toy_count, s.model.size,
                               uint64_t(s.seed) + 100, s.model.channels);
  } else {
    ds = sdit::load_idx(s.images, s.labels.empty()
                                      ? std::optional<std::string>{}
                                      : std::optional<std::string>{s.labels});
  }

  if (s.precision == "f32") return run_train<float>(s, ds, echo);
  return run_train<double>(s, ds, echo);
}

// ---------------------------------------------------------------------------
// sample

struct SampleSettings {
  std::string ckpt;
  int64_t n = 16;
  int64_t seed = 1;
  int64_t stride = 1;
  int64_t cols = 4;
  std::string out_dir = "samples";
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string precision = "f64";
  bool deterministic = false;
};

template <class T>
int run_sample(const SampleSettings& s, const sdit::Checkpoint& ck,
               const std::string& echo) {
  sdit::ModelConfig cfg = sdit::ModelConfig::from_text(ck.config_text);
  auto model = sdit::SditModel<T>::init(cfg, 0);
  sdit::apply_checkpoint(ck, model);
  auto sched = sdit::make_schedule_linear(cfg.max_diffusion_step, s.beta_start,
                                          s.beta_end);
  sdit::Rng rng(uint64_t(s.seed));
  auto out = sdit::ddpm_sample(model, sched, s.n, rng, s.stride);

  fs::create_directories(s.out_dir);
  write_text(fs::path(s.out_dir) / "config.txt", echo);
  std::vector<double> pix(out.value().begin(), out.value().end());
  const std::string grid_name = cfg.channels == 3 ? "grid.ppm" : "grid.pgm";
  sdit::write_image_grid(pix, s.n, cfg.channels, cfg.image_size,
                         cfg.image_size,
                         (fs::path(s.out_dir) / grid_name).string(), s.cols);
  write_raw_dump(fs::path(s.out_dir) / "samples.bin", pix, s.n, cfg.channels,
                 cfg.image_size, cfg.image_size);
  std::cout << "wrote " << (fs::path(s.out_dir) / grid_name).string()
            << " and samples.bin\n";
  return 0;
}

int cmd_sample(SampleSettings& s, Binder& binder) {
  binder.apply_config_file();
  const std::string echo = binder.echo();
  std::cout << echo;
  if (s.ckpt.empty()) throw sdit::BadParam("sample: --ckpt is required");
  if (s.n < 1) throw sdit::BadParam("sample: --n must be >= 1");
  if (s.cols < 1) throw sdit::BadParam("sample: --cols must be >= 1");
  if (s.precision != "f32" && s.precision != "f64")
    throw sdit::BadParam("sample: --precision must be f32 or f64");
  sdit::Checkpoint ck = sdit::load_checkpoint(s.ckpt);
  if (s.precision == "f32") return run_sample<float>(s, ck, echo);
  return run_sample<double>(s, ck, echo);
}

// ---------------------------------------------------------------------------
// verify

struct VerifySettings {
  std::string only;
  int64_t seed = 1234;
  bool inject_wkv_sign_error = false;
};

int cmd_verify(VerifySettings& s, Binder& binder) {
  binder.apply_config_file();
  std::cout << binder.echo();
  std::vector<std::string> only;
  if (!s.only.empty()) {
    std::stringstream ss(s.only);
    std::string g;
    while (std::getline(ss, g, ',')) {
      bool known = false;
      for (const auto& k : sdit::check_groups()) known = known || k == g;
      if (!known) throw sdit::BadParam("verify: unknown group '" + g + "'");
      only.push_back(g);
    }
  }
  sdit::detail::wkv_negate_grad_u = s.inject_wkv_sign_error;
  auto results = sdit::run_checks(only, uint64_t(s.seed));
  sdit::detail::wkv_negate_grad_u = false;
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %-8s %s%s%s\n", r.pass ? "PASS" : "FAIL",
                r.group.c_str(), r.name.c_str(), r.detail.empty() ? "" : "  ",
                r.detail.c_str());
    all = all && r.pass;
  }
  std::printf("%zu checks, %s\n", results.size(),
              all ? "all passed" : "FAILURES present");
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------
// count

struct CountSettings {
  ModelFlags model;
  int64_t t_diff = 1000;
  bool csv = false;
};

int cmd_count(CountSettings& s, Binder& binder) {
  auto cfg_keys = binder.apply_config_file();
  s.model.apply_preset(binder, cfg_keys);
  std::cout << binder.echo();
  sdit::ModelConfig cfg = s.model.to_config(s.t_diff);
  auto r = sdit::count_params_macs(cfg);
  const int64_t T = cfg.spike_steps;
  if (s.csv) {
    std::printf("metric,value\n");
    std::printf("params,%" PRId64 "\n", r.params);
    std::printf("macs_embed,%" PRId64 "\n", r.embed_macs);
    std::printf("macs_per_spike_step,%" PRId64 "\n", r.per_step_macs);
    std::printf("macs_total_T%" PRId64 ",%" PRId64 "\n", T, r.total_macs(T));
  } else {
    std::printf("parameters:            %" PRId64 " (%.2f M)\n", r.params,
                double(r.params) / 1e6);
    std::printf("macs, embeddings:      %" PRId64 "\n", r.embed_macs);
    std::printf("macs, one spike step:  %" PRId64 "\n", r.per_step_macs);
    std::printf("macs, full forward xT: %" PRId64 " (%.2f G, T=%" PRId64 ")\n",
                r.total_macs(T), double(r.total_macs(T)) / 1e9, T);
    std::printf("reference model size:  11.67 M params, 1.32 G MACs\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdit: spiking diffusion transformer"};
  app.require_subcommand(1);

  TrainSettings ts;
  CLI::App* train = app.add_subcommand("train", "train on a dataset");
  Binder tb(train);
  ts.model.bind(tb);
  tb.opt("toy", ts.toy, "toy dataset kind: bars | blobs");
  tb.opt("toy-count", ts.toy_count, "toy dataset item count");
  tb.opt("images", ts.images, "IDX image file");
  tb.opt("labels", ts.labels, "IDX label file (validated, unused)");
  tb.opt("steps", ts.steps, "optimizer steps");
  tb.opt("batch", ts.batch, "items per step");
  tb.opt("lr", ts.lr, "AdamW learning rate");
  tb.opt("weight-decay", ts.weight_decay, "AdamW weight decay");
  tb.opt("seed", ts.seed, "run seed");
  tb.opt("run-dir", ts.run_dir, "output directory");
  tb.opt("log-interval", ts.log_interval, "steps between loss.csv rows");
  tb.opt("ckpt-interval", ts.ckpt_interval, "steps between checkpoints");
  tb.opt("t-diff", ts.t_diff, "diffusion steps");
  tb.opt("beta-start", ts.beta_start, "linear schedule start");
  tb.opt("beta-end", ts.beta_end, "linear schedule end");
  tb.flag("deterministic", ts.deterministic, "force sequential execution");
  tb.opt("precision", ts.precision, "f32 | f64");
  tb.opt("jobs", ts.jobs, "batch-parallel workers");

  SampleSettings ss;
  CLI::App* sample = app.add_subcommand("sample", "sample from a checkpoint");
  Binder sb(sample);
  sb.opt("ckpt", ss.ckpt, "checkpoint path");
  sb.opt("n", ss.n, "number of samples");
  sb.opt("seed", ss.seed, "sampling seed");
  sb.opt("stride", ss.stride, "timestep stride");
  sb.opt("cols", ss.cols, "grid columns");
  sb.opt("out-dir", ss.out_dir, "output directory");
  sb.opt("beta-start", ss.beta_start, "linear schedule start");
  sb.opt("beta-end", ss.beta_end, "linear schedule end");
  sb.opt("precision", ss.precision, "f32 | f64");
  sb.flag("deterministic", ss.deterministic, "force sequential execution");

  VerifySettings vs;
  CLI::App* verify = app.add_subcommand("verify", "run built-in checks");
  Binder vb(verify);
  vb.opt("only", vs.only, "comma-separated groups");
  vb.opt("seed", vs.seed, "check seed");
  verify
      ->add_flag("--inject-wkv-sign-error", vs.inject_wkv_sign_error,
                 "test fixture: break the wkv backward on purpose")
      ->group("");  // hidden

  CountSettings cs;
  CLI::App* count = app.add_subcommand("count", "parameter and MAC report");
  Binder cb(count);
  cs.model.bind(cb);
  cb.opt("t-diff", cs.t_diff, "diffusion steps (conditioning range)");
  cb.flag("csv", cs.csv, "emit CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train(ts, tb);
    if (*sample) return cmd_sample(ss, sb);
    if (*verify) return cmd_verify(vs, vb);
    if (*count) return cmd_count(cs, cb);
  } catch (const sdit::NonFinite& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const sdit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
