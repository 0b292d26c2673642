#pragma once

// The denoiser as one trainable unit: condition encoders, DiT and the
// alignment heads share a single parameter store.

#include "acestep/dit.hpp"
#include "acestep/lora.hpp"
#include "acestep/objectives.hpp"

#include <functional>

namespace acestep {

template <typename T>
class Denoiser {
 public:
  Denoiser(const DitConfig& cfg, std::uint64_t seed) : dit_(cfg) {
    Rng rng(derive_seed(seed, 0xd17));
    dit_.init(params, rng);
    init_ssl_heads(params, cfg.model_dim, rng);
  }

  const DitConfig& config() const { return dit_.config(); }
  const LinearDit<T>& dit() const { return dit_; }

  WeightSource<T> weights(const LoraAdapter<T>* lora = nullptr, bool base_trainable = true) const {
    return WeightSource<T>{&params, lora, base_trainable};
  }

  // Velocity prediction for one noisy token sequence, no gradients.
  Matrix<float> velocity(const Matrix<float>& tokens, double t, const ConditionBundle& cond,
                         const LoraAdapter<T>* lora = nullptr) const {
    Tape<T> tape(false);
    const Matrix<T> x = tokens.template cast<T>();
    DitOutput<T> out = dit_.forward(tape, weights(lora, false), x, t, cond);
    return out.velocity.value().template cast<float>();
  }

  ParamStore<T> params;

 private:
  LinearDit<T> dit_;
};

}  // namespace acestep
