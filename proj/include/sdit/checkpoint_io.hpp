#pragma once

#include <string>
#include <vector>

#include "sdit/data_io.hpp"
#include "sdit/diffusion.hpp"
#include "sdit/model.hpp"

namespace sdit {

namespace detail {

template <class T>
TensorBlob blob_from(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, double>)
    return TensorBlob::from_f64(t.shape(), t.value());
  else
    return TensorBlob::from_f32(t.shape(), t.value());
}

template <class T>
void blob_into(const TensorBlob& b, Tensor<T>& t, const std::string& name) {
  if (b.dims != t.shape())
    throw ConfigMismatch("checkpoint: shape mismatch for " + name);
  if constexpr (std::is_same_v<T, double>)
    t.value() = b.to_f64();
  else
    t.value() = b.to_f32();
}

}  // namespace detail

// Model parameters (each exactly once), optimizer moments keyed by parameter
// name, the trainer step and the rng stream.
template <class T>
Checkpoint make_checkpoint(const SditModel<T>& model, const AdamW<T>* opt,
                           uint64_t step, const std::string& rng_state) {
  Checkpoint ck;
  ck.config_text = model.cfg.canonical_text();
  ck.step = step;
  ck.rng_state = rng_state;
  for (const auto& [name, p] : model.named_params())
    ck.tensors[name] = detail::blob_from(p);
  if (opt) {
    for (const auto& [name, m] : opt->moments_m_const())
      ck.tensors["adam.m." + name] =
          TensorBlob::from_f64({static_cast<int64_t>(m.size())}, m);
    for (const auto& [name, v] : opt->moments_v_const())
      ck.tensors["adam.v." + name] =
          TensorBlob::from_f64({static_cast<int64_t>(v.size())}, v);
  }
  return ck;
}

// Restores parameters into a live model (the architectures must agree),
// optimizer moments when an optimizer is given, and the rng when given.
template <class T>
void apply_checkpoint(const Checkpoint& ck, SditModel<T>& model,
                      AdamW<T>* opt = nullptr, Rng* rng = nullptr) {
  if (ck.config_text != model.cfg.canonical_text())
    throw ConfigMismatch(
        "checkpoint: model configuration does not match\n--- checkpoint\n" +
        ck.config_text + "--- live\n" + model.cfg.canonical_text());
  for (auto& [name, p] : model.named_params()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw ConfigMismatch("checkpoint: missing parameter " + name);
    Tensor<T> dst = p;
    detail::blob_into(it->second, dst, name);
  }
  if (opt) {
    opt->set_step_count(ck.step);
    for (auto& [name, m] : opt->moments_m()) {
      auto it = ck.tensors.find("adam.m." + name);
      if (it != ck.tensors.end()) m = it->second.to_f64();
    }
    for (auto& [name, v] : opt->moments_v()) {
      auto it = ck.tensors.find("adam.v." + name);
      if (it != ck.tensors.end()) v = it->second.to_f64();
    }
  }
  if (rng && !ck.rng_state.empty()) rng->set_state_text(ck.rng_state);
}

}  // namespace sdit
