#pragma once

#include <cmath>
#include <memory>

#include "sdit/errors.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

// binary: Heaviside spikes forward, arctangent surrogate backward, detached
//   hard reset. The production mode.
// smooth: the spike is the surrogate's antiderivative (a soft sigmoid-like
//   gate) and the whole step is an ordinary differentiable function, reset
//   included. Used by finite-difference checks, where the discontinuous
//   forward would make central differences meaningless.
enum class LifMode { binary, smooth };

struct LifConfig {
  double tau = 2.0;
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_alpha = 2.0;
  LifMode mode = LifMode::binary;

  void validate() const {
    if (!(tau > 1.0)) throw BadParam("lif: tau must be > 1");
    if (!(v_threshold > v_reset))
      throw BadParam("lif: v_threshold must exceed v_reset");
    if (!(surrogate_alpha > 0.0)) throw BadParam("lif: alpha must be > 0");
  }
};

// Membrane potential of one neuron layer, persisting across spiking time
// steps within a forward pass. Exclusively owned by that pass.
template <class T>
struct LifState {
  Tensor<T> v;
  int step_index = 0;

  bool initialized() const { return v.defined(); }
  void clear() {
    v = Tensor<T>();
    step_index = 0;
  }
};

inline double surrogate_grad_scalar(double u, double alpha) {
  const double pi = 3.14159265358979323846;
  const double s = (pi / 2.0) * alpha * u;
  return alpha / (2.0 * (1.0 + s * s));
}

// Arctangent surrogate derivative g(u) = alpha / (2*(1+((pi/2)*alpha*u)^2)).
// Even, positive, maximal at 0; integrates to 1 over the real line.
template <class T>
Tensor<T> surrogate_grad(const Tensor<T>& h_minus_thresh, double alpha) {
  if (!(alpha > 0.0)) throw BadParam("surrogate_grad: alpha must be > 0");
  Tensor<T> out = Tensor<T>::zeros(h_minus_thresh.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out.value()[i] = static_cast<T>(surrogate_grad_scalar(
        static_cast<double>(h_minus_thresh.value()[i]), alpha));
  return out;
}

// Antiderivative of the surrogate: soft spike for smooth mode.
inline double soft_spike_scalar(double u, double alpha) {
  const double pi = 3.14159265358979323846;
  return std::atan((pi / 2.0) * alpha * u) / pi + 0.5;
}

// One LIF update. Charge H = v + (x - (v - v_reset))/tau; spike where
// H >= v_threshold; hard reset v <- H*(1-S) + v_reset*S. Returns the spike
// tensor and replaces state.v with the post-reset potential (a graph tensor,
// so gradients flow across spiking time steps).
template <class T>
Tensor<T> lif_step(const Tensor<T>& x, LifState<T>& state,
                   const LifConfig& cfg) {
  cfg.validate();
  detail::ensure_all_finite(x, "lif_step");
  if (!state.initialized()) {
    state.v = Tensor<T>::full(x.shape(), static_cast<T>(cfg.v_reset));
  } else if (state.v.shape() != x.shape()) {
    throw StateShapeMismatch("lif_step: state " + shape_str(state.v.shape()) +
                             " vs input " + shape_str(x.shape()));
  }
  const Tensor<T> v_in = state.v;
  const T tau = static_cast<T>(cfg.tau);
  const T th = static_cast<T>(cfg.v_threshold);
  const T vr = static_cast<T>(cfg.v_reset);
  const int64_t n = x.numel();

  Tensor<T> spike = Tensor<T>::zeros(x.shape());
  Tensor<T> v_out = Tensor<T>::zeros(x.shape());
  auto H = std::make_shared<std::vector<T>>(n);
  const auto& xv = x.value();
  const auto& vv = v_in.value();
  if (cfg.mode == LifMode::binary) {
    for (int64_t i = 0; i < n; ++i) {
      const T h = vv[i] + (xv[i] - (vv[i] - vr)) / tau;
      (*H)[i] = h;
      const bool s = h >= th;
      spike.value()[i] = s ? T(1) : T(0);
      v_out.value()[i] = s ? vr : h;
    }
    detail::finish_op<T>(
        {x, v_in}, {spike, v_out}, [x, v_in, spike, v_out, H, cfg, tau]() {
          const auto& gs = spike.grad();
          const auto& gv = v_out.grad();
          const auto& sv = spike.value();
          const int64_t n = static_cast<int64_t>(gs.size());
          for (int64_t i = 0; i < n; ++i) {
            const double u =
                static_cast<double>((*H)[i]) - cfg.v_threshold;
            const T g = static_cast<T>(
                surrogate_grad_scalar(u, cfg.surrogate_alpha));
            // Detached reset: S is a constant in the v_out expression.
            const T gH = gs[i] * g + gv[i] * (T(1) - sv[i]);
            if (x.requires_grad()) x.grad()[i] += gH / tau;
            if (v_in.requires_grad())
              v_in.grad()[i] += gH * (T(1) - T(1) / tau);
          }
        });
  } else {
    for (int64_t i = 0; i < n; ++i) {
      const T h = vv[i] + (xv[i] - (vv[i] - vr)) / tau;
      (*H)[i] = h;
      const T s = static_cast<T>(soft_spike_scalar(
          static_cast<double>(h) - cfg.v_threshold, cfg.surrogate_alpha));
      spike.value()[i] = s;
      v_out.value()[i] = h * (T(1) - s) + vr * s;
    }
    detail::finish_op<T>(
        {x, v_in}, {spike, v_out}, [x, v_in, spike, v_out, H, cfg, tau, vr]() {
          const auto& gs = spike.grad();
          const auto& gv = v_out.grad();
          const auto& sv = spike.value();
          const int64_t n = static_cast<int64_t>(gs.size());
          for (int64_t i = 0; i < n; ++i) {
            const T h = (*H)[i];
            const double u = static_cast<double>(h) - cfg.v_threshold;
            const T g = static_cast<T>(
                surrogate_grad_scalar(u, cfg.surrogate_alpha));
            // v = H(1-S) + vr*S, S = G(H-th): dv/dH = (1-S) + (vr-H)*g.
            const T gH =
                gs[i] * g + gv[i] * ((T(1) - sv[i]) + (vr - h) * g);
            if (x.requires_grad()) x.grad()[i] += gH / tau;
            if (v_in.requires_grad())
              v_in.grad()[i] += gH * (T(1) - T(1) / tau);
          }
        });
  }
  state.v = v_out;
  state.step_index += 1;
  return spike;
}

// Returns the potential to v_reset and the step counter to 0. Keeps the
// allocation (and shape) when one exists; LifState::clear drops it.
template <class T>
void reset_state(LifState<T>& state, const LifConfig& cfg) {
  if (state.initialized())
    state.v =
        Tensor<T>::full(state.v.shape(), static_cast<T>(cfg.v_reset));
  state.step_index = 0;
}

}  // namespace sdit
