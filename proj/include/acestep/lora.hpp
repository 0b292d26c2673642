#pragma once

// Low-rank adapters over named weight matrices, and the weight lookup used by
// every forward pass (base weight, optionally frozen, plus adapter delta).

#include "acestep/autodiff.hpp"
#include "acestep/params.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace acestep {

struct LoraConfig {
  int rank = 4;
  double alpha = 4.0;
  std::vector<std::string> targets;  // base parameter names, each [out x in]
};

// For each target W [out x in]: A [rank x in] (random), B [out x rank] (zero),
// so a fresh adapter is an exact no-op. Effective weight W + (alpha/rank) B A.
template <typename T>
class LoraAdapter {
 public:
  LoraAdapter(const ParamStore<T>& base, LoraConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    require(cfg_.rank >= 1, ErrorKind::kInvalidArgument, "LoRA rank must be >= 1");
    Rng rng(derive_seed(seed, 0x10a0));
    for (const auto& name : cfg_.targets) {
      const Matrix<T>& w = base.at(name);
      require(cfg_.rank < std::min(w.rows(), w.cols()), ErrorKind::kInvalidArgument,
              "LoRA rank " + std::to_string(cfg_.rank) + " must be below min dim of '" + name + "' " +
                  shape_str(w.rows(), w.cols()));
      init_normal(params.add("lora." + name + ".A", cfg_.rank, w.cols()), rng, 1.0 / std::sqrt(double(w.cols())));
      params.add("lora." + name + ".B", w.rows(), cfg_.rank);
    }
  }

  const LoraConfig& config() const { return cfg_; }
  T scale() const { return static_cast<T>(cfg_.alpha / cfg_.rank); }

  bool targets(const std::string& name) const {
    return std::find(cfg_.targets.begin(), cfg_.targets.end(), name) != cfg_.targets.end();
  }

  Matrix<T> delta(const std::string& name) const {
    return scale() * (params.at("lora." + name + ".B") * params.at("lora." + name + ".A"));
  }

  // W += (alpha/rank) B A for every target; the adapter itself is unchanged.
  void merge_into(ParamStore<T>& base) const {
    for (const auto& name : cfg_.targets) base.at(name) += delta(name);
  }

  ParamStore<T> params;

 private:
  LoraConfig cfg_;
};

// Resolves parameter names to tape leaves for one forward pass.
template <typename T>
struct WeightSource {
  const ParamStore<T>* base = nullptr;
  const LoraAdapter<T>* lora = nullptr;
  bool base_trainable = true;

  Var<T> operator()(Tape<T>& tape, const std::string& name) const {
    const Matrix<T>& w = base->at(name);
    Var<T> v = base_trainable ? tape.param(w) : tape.constant_ref(w);
    if (lora && lora->targets(name)) {
      Var<T> a = tape.param(lora->params.at("lora." + name + ".A"));
      Var<T> b = tape.param(lora->params.at("lora." + name + ".B"));
      v = v + scale(matmul(b, a), lora->scale());
    }
    return v;
  }
};

}  // namespace acestep
