#pragma once

// AdamW with decoupled weight decay, global-norm clipping and linear warmup.

#include "acestep/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace acestep {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.8;
  double beta2 = 0.9;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Learning rate for the given step: lr * min(1, step / warmup), flat afterwards.
inline double lr_at(long step, double lr, long warmup_steps) {
  if (warmup_steps <= 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

template <typename T>
double global_norm(const std::vector<Matrix<T>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

// Scales all gradients by max_norm / ||g|| when the global norm exceeds
// max_norm. Returns the pre-clip norm. Non-finite gradients abort.
template <typename T>
double clip_gradients(std::vector<Matrix<T>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  require(std::isfinite(norm), ErrorKind::kNonFinite, "non-finite gradient norm");
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

// Optimizer moments for each entry of a ParamStore; moments of non-trainable
// entries stay zero.
template <typename T>
struct AdamWState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  long step = 0;

  static AdamWState zeros_like(const ParamStore<T>& params) {
    AdamWState s;
    for (const auto& e : params) {
      s.m.push_back(Matrix<T>::Zero(e.value.rows(), e.value.cols()));
      s.v.push_back(Matrix<T>::Zero(e.value.rows(), e.value.cols()));
    }
    return s;
  }
};

// One decoupled-weight-decay update (PyTorch AdamW ordering) with learning
// rate `lr`. grads align with the store's entries.
template <typename T>
void adamw_update(ParamStore<T>& params, AdamWState<T>& state, const std::vector<Matrix<T>>& grads,
                  const AdamWConfig& cfg, double lr) {
  require(grads.size() == params.size() && state.m.size() == params.size(), ErrorKind::kShapeMismatch,
          "adamw_update: gradient list does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  std::size_t i = 0;
  for (auto& e : params) {
    if (e.trainable) {
      auto& m = state.m[i];
      auto& v = state.v[i];
      const auto& g = grads[i];
      e.value *= decay;
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      e.value.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
    }
    ++i;
  }
}

}  // namespace acestep
