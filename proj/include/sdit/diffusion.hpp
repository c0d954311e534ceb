#pragma once

#include <cmath>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sdit/data_io.hpp"
#include "sdit/errors.hpp"
#include "sdit/model.hpp"
#include "sdit/rng.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

// DDPM beta/alpha/alpha_bar arrays, always computed at 64-bit.
struct NoiseSchedule {
  int64_t T_diff = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

inline NoiseSchedule make_schedule_linear(int64_t T_diff, double beta_start,
                                          double beta_end) {
  if (T_diff < 1) throw BadRange("schedule: T_diff must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw BadRange("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T_diff = T_diff;
  s.beta.resize(T_diff);
  s.alpha.resize(T_diff);
  s.alpha_bar.resize(T_diff);
  double prod = 1.0;
  for (int64_t t = 0; t < T_diff; ++t) {
    s.beta[t] = T_diff == 1
                    ? beta_start
                    : beta_start + (beta_end - beta_start) * double(t) /
                                       double(T_diff - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int64_t t, const Tensor<T>& eps,
                   const NoiseSchedule& s) {
  if (t < 0 || t >= s.T_diff) throw OutOfRange("q_sample: t out of range");
  if (eps.shape() != x0.shape())
    throw ShapeMismatch("q_sample: eps shape mismatch");
  const T c0 = static_cast<T>(std::sqrt(s.alpha_bar[t]));
  const T c1 = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
  return add(mul_scalar(x0, c0), mul_scalar(eps, c1));
}

// ---------------------------------------------------------------------------
// AdamW over a fixed parameter list. Moments are kept by parameter name so
// checkpoints can restore them.

template <class T>
class AdamW {
 public:
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  explicit AdamW(std::vector<std::pair<std::string, Tensor<T>>> params)
      : params_(std::move(params)) {
    for (auto& [name, p] : params_) {
      m_[name].assign(p.numel(), 0.0);
      v_[name].assign(p.numel(), 0.0);
    }
  }

  void zero_grads() {
    for (auto& [_, p] : params_)
      std::fill(p.grad().begin(), p.grad().end(), T(0));
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, double(t_));
    const double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (auto& [name, p] : params_) {
      auto& m = m_[name];
      auto& v = v_[name];
      auto& val = p.value();
      const auto& g = p.grad();
      for (int64_t i = 0; i < p.numel(); ++i) {
        const double gi = double(g[i]);
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        val[i] = static_cast<T>(
            double(val[i]) -
            lr * (mhat / (std::sqrt(vhat) + eps) +
                  weight_decay * double(val[i])));
      }
    }
  }

  uint64_t step_count() const { return t_; }
  void set_step_count(uint64_t t) { t_ = t; }
  std::map<std::string, std::vector<double>>& moments_m() { return m_; }
  std::map<std::string, std::vector<double>>& moments_v() { return v_; }
  const std::map<std::string, std::vector<double>>& moments_m_const() const {
    return m_;
  }
  const std::map<std::string, std::vector<double>>& moments_v_const() const {
    return v_;
  }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const {
    return params_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, std::vector<double>> m_, v_;
  uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Noise-prediction MSE over a batch of items. Each item gets its own
// uniformly drawn timestep and noise; all draws happen up front, in item
// order, so the trainer's rng consumption is a documented, replayable
// sequence (t then the eps pixels, item by item). Forward/backward then runs
// per item with fresh LIF states; gradients accumulate into the parameter
// tensors scaled by 1/B. Returns the mean loss.
template <class T, class Fwd>
double loss_step_core(const std::vector<Tensor<T>>& x0_items, Fwd&& forward_fn,
                      const NoiseSchedule& sched, Rng& rng) {
  const int64_t B = static_cast<int64_t>(x0_items.size());
  if (B < 1) throw BadParam("loss_step: empty batch");
  std::vector<int64_t> ts(B);
  std::vector<Tensor<T>> epss(B);
  for (int64_t i = 0; i < B; ++i) {
    ts[i] = rng.uniform_int(sched.T_diff);
    std::vector<T> e(x0_items[i].numel());
    for (auto& x : e) x = static_cast<T>(rng.normal());
    epss[i] = Tensor<T>::from(x0_items[i].shape(), std::move(e));
  }
  double total = 0.0;
  for (int64_t i = 0; i < B; ++i) {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> x_t = q_sample(x0_items[i], ts[i], epss[i], sched);
    Tensor<T> pred = forward_fn(x_t, ts[i]);
    Tensor<T> diff = sub(pred, epss[i]);
    Tensor<T> item_loss = mean(mul(diff, diff));
    total += double(item_loss.item());
    if (item_loss.requires_grad())  // gradient-free models just score
      tape.backward(mul_scalar(item_loss, T(1) / static_cast<T>(B)));
  }
  return total / double(B);
}

template <class T>
double loss_step(const std::vector<Tensor<T>>& x0_items, SditModel<T>& model,
                 const NoiseSchedule& sched, Rng& rng) {
  return loss_step_core<T>(
      x0_items,
      [&](const Tensor<T>& x_t, int64_t t) {
        model.reset_states();
        return model.forward(x_t, t);
      },
      sched, rng);
}

// Batch-parallel variant. Items are split into contiguous shards; each
// worker owns a full model replica (parameter values synced from the master
// here, separate grad buffers and LIF states) and runs its shard on its own
// tapes. Worker grads are reduced into the master in shard order, so the
// result is deterministic for a fixed worker count. The rng draw order is
// identical to the sequential path.
template <class T>
double loss_step_parallel(const std::vector<Tensor<T>>& x0_items,
                          SditModel<T>& master,
                          std::vector<SditModel<T>>& workers,
                          const NoiseSchedule& sched, Rng& rng) {
  if (workers.empty()) return loss_step(x0_items, master, sched, rng);
  const int64_t B = static_cast<int64_t>(x0_items.size());
  if (B < 1) throw BadParam("loss_step: empty batch");
  std::vector<int64_t> ts(B);
  std::vector<Tensor<T>> epss(B);
  for (int64_t i = 0; i < B; ++i) {
    ts[i] = rng.uniform_int(sched.T_diff);
    std::vector<T> e(x0_items[i].numel());
    for (auto& x : e) x = static_cast<T>(rng.normal());
    epss[i] = Tensor<T>::from(x0_items[i].shape(), std::move(e));
  }

  const int64_t J = static_cast<int64_t>(workers.size()) + 1;
  std::vector<SditModel<T>*> models;
  models.push_back(&master);
  for (auto& w : workers) {
    w.copy_params_from(master);
    models.push_back(&w);
  }
  for (auto* m : models) m->zero_grads();

  std::vector<double> item_loss(B, 0.0);
  std::vector<std::exception_ptr> errs(J);
  auto run_shard = [&](int64_t j) {
    try {
      SditModel<T>& m = *models[j];
      const int64_t lo = j * B / J, hi = (j + 1) * B / J;
      for (int64_t i = lo; i < hi; ++i) {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> x_t = q_sample(x0_items[i], ts[i], epss[i], sched);
        m.reset_states();
        Tensor<T> pred = m.forward(x_t, ts[i]);
        Tensor<T> diff = sub(pred, epss[i]);
        Tensor<T> loss = mean(mul(diff, diff));
        item_loss[i] = double(loss.item());
        if (loss.requires_grad())
          tape.backward(mul_scalar(loss, T(1) / static_cast<T>(B)));
      }
    } catch (...) {
      errs[j] = std::current_exception();
    }
  };
  std::vector<std::thread> threads;
  for (int64_t j = 1; j < J; ++j) threads.emplace_back(run_shard, j);
  run_shard(0);
  for (auto& th : threads) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);

  // fixed-order reduction: shard 1..J-1 into the master
  auto master_params = master.named_params();
  for (int64_t j = 1; j < J; ++j) {
    auto wp = models[j]->named_params();
    for (size_t p = 0; p < master_params.size(); ++p) {
      auto& dst = master_params[p].second.grad();
      const auto& src = wp[p].second.grad();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  double total = 0.0;
  for (int64_t i = 0; i < B; ++i) total += item_loss[i];
  return total / double(B);
}

// Assembles batch items as [1,C,H,W] tensors; one index draw per item.
template <class T>
std::vector<Tensor<T>> draw_batch(const Dataset& ds, int64_t batch_size,
                                  Rng& rng) {
  if (batch_size < 1) throw BadParam("draw_batch: batch_size must be >= 1");
  std::vector<Tensor<T>> items;
  for (int64_t i = 0; i < batch_size; ++i) {
    const int64_t idx = rng.uniform_int(ds.count);
    std::vector<T> v(ds.item_size());
    const double* src = ds.data.data() + idx * ds.item_size();
    for (int64_t j = 0; j < ds.item_size(); ++j) v[j] = static_cast<T>(src[j]);
    items.push_back(Tensor<T>::from({1, ds.channels, ds.height, ds.width},
                                    std::move(v)));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Ancestral sampling. Iterates the selected timesteps descending; for
// consecutive steps this is the textbook update
//   x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)
//           + sqrt(beta_t) z,
// and for a strided subsequence alpha_t generalizes to abar_t/abar_{t'}.
// z = 0 on the final step. Output clamped to [-1,1] at the end only.
template <class T>
Tensor<T> ddpm_sample(SditModel<T>& model, const NoiseSchedule& sched,
                      int64_t n, Rng& rng, int64_t stride = 1) {
  if (n < 1) throw BadParam("sample: n must be >= 1");
  if (stride < 1 || (sched.T_diff - 1) % stride != 0)
    throw BadRange("sample: stride must divide the step sequence");
  NoTapeScope<T> quiet;
  const int64_t C = model.cfg.channels, H = model.cfg.image_size;
  std::vector<T> x(n * C * H * H);
  for (auto& v : x) v = static_cast<T>(rng.normal());
  Tensor<T> xt = Tensor<T>::from({n, C, H, H}, std::move(x));

  for (int64_t t = sched.T_diff - 1; t >= 0; t -= stride) {
    const int64_t t_prev = t - stride;  // -1 past the end
    const double abar = sched.alpha_bar[t];
    const double abar_prev = t_prev >= 0 ? sched.alpha_bar[t_prev] : 1.0;
    const double alpha_eff = abar / abar_prev;
    const double beta_eff = 1.0 - alpha_eff;

    model.reset_states();
    Tensor<T> eps_hat = model.forward(xt, t);

    const T c_eps = static_cast<T>(beta_eff / std::sqrt(1.0 - abar));
    const T c_x = static_cast<T>(1.0 / std::sqrt(alpha_eff));
    const T sigma = static_cast<T>(std::sqrt(beta_eff));
    Tensor<T> next = Tensor<T>::zeros(xt.shape());
    for (int64_t i = 0; i < xt.numel(); ++i) {
      T v = c_x * (xt.value()[i] - c_eps * eps_hat.value()[i]);
      if (t > 0) v += sigma * static_cast<T>(rng.normal());
      next.value()[i] = v;
    }
    xt = next;
  }
  for (auto& v : xt.value()) v = std::min(T(1), std::max(T(-1), v));
  return xt;
}

}  // namespace sdit
