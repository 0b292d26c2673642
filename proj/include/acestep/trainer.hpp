#pragma once

// Denoiser training: length-grouped batching, composite loss, clipping,
// AdamW with warmup, optional low-rank adaptation of a frozen base.

#include "acestep/lora.hpp"
#include "acestep/model.hpp"
#include "acestep/objectives.hpp"
#include "acestep/optim.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace acestep {

enum class Phase { kPretrain, kFinetune };

struct TrainConfig {
  AdamWConfig opt;
  long warmup_steps = 200;
  long steps = 3000;
  int batch = 4;
  double clip_norm = 0.5;
  Phase phase = Phase::kPretrain;
  LossWeights weights;
  DropoutRates dropout;
  double shift = 3.0;
  std::uint64_t seed = 13;
  bool omit_speaker = false;
  int lora_rank = 0;  // > 0 trains an adapter over a frozen base
  double lora_alpha = 4.0;

  // The effective configuration: finetuning down-weights the hubert term and
  // drops speaker embeddings, nothing else.
  TrainConfig resolved() const {
    TrainConfig c = *this;
    if (phase == Phase::kFinetune) {
      c.weights.w_hubert = 0.01;
      c.omit_speaker = true;
    }
    return c;
  }
};

// One training example in token layout with its cached teacher features.
struct TrainItem {
  Matrix<float> tokens;  // clean latent [T_lat x 8F]
  ConditionBundle cond;
  Matrix<float> mert;    // [T_M x 1024]
  Matrix<float> hubert;  // [T_H x 768]
};

struct StepMetrics {
  long step = 0;
  double l_fm = 0.0;
  double l_ssl = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::array<int, 4> drops{};  // items with global / text / lyric / speaker dropped

  std::string to_line() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "step=%ld l_fm=%.9g l_ssl=%.9g grad_norm=%.9g lr=%.9g drops=%d,%d,%d,%d", step, l_fm,
                  l_ssl, grad_norm, lr, drops[0], drops[1], drops[2], drops[3]);
    return buf;
  }
};

template <typename T>
struct TrainState {
  Denoiser<T> model;
  std::optional<LoraAdapter<T>> lora;
  AdamWState<T> opt;
  long step = 0;

  ParamStore<T>& trainable() { return lora ? lora->params : model.params; }
  const ParamStore<T>& trainable() const { return lora ? lora->params : model.params; }
  const LoraAdapter<T>* adapter() const { return lora ? &*lora : nullptr; }
};

template <typename T>
TrainState<T> make_train_state(const DitConfig& dit, const TrainConfig& cfg, std::uint64_t model_seed) {
  TrainState<T> s{Denoiser<T>(dit, model_seed), std::nullopt, {}, 0};
  if (cfg.lora_rank > 0) s.lora.emplace(s.model.params, LoraConfig{cfg.lora_rank, cfg.lora_alpha, s.model.dit().lora_targets()}, cfg.seed);
  s.opt = AdamWState<T>::zeros_like(s.trainable());
  return s;
}

// Buckets items by length, shuffles inside each bucket, cuts batches within
// buckets and shuffles the batch order. Every item appears exactly once.
inline std::vector<std::vector<std::size_t>> length_grouped_batches(const std::vector<Index>& lengths, int batch_size,
                                                                    Rng& rng) {
  require(batch_size >= 1, ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  require(!lengths.empty(), ErrorKind::kInvalidArgument, "length_grouped_batches: empty dataset");
  std::map<Index, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < lengths.size(); ++i) buckets[lengths[i]].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, items] : buckets) {
    std::shuffle(items.begin(), items.end(), rng.engine());
    for (std::size_t i = 0; i < items.size(); i += static_cast<std::size_t>(batch_size)) {
      const auto end = std::min(items.size(), i + static_cast<std::size_t>(batch_size));
      batches.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i), items.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng.engine());
  return batches;
}

inline std::vector<Index> item_lengths(const std::vector<TrainItem>& data) {
  std::vector<Index> out;
  for (const auto& d : data) out.push_back(d.tokens.rows());
  return out;
}

// Batch used at 1-based step k. Each epoch has its own seeded order, so the
// batch sequence depends only on (seed, step).
inline std::vector<std::size_t> batch_for_step(const std::vector<Index>& lengths, int batch_size, std::uint64_t seed,
                                               long step) {
  Rng probe(0);
  const std::size_t per_epoch = length_grouped_batches(lengths, batch_size, probe).size();
  const auto idx = static_cast<std::size_t>(step - 1);
  Rng rng(derive_seed(seed, 0xe90c, idx / per_epoch));
  return length_grouped_batches(lengths, batch_size, rng)[idx % per_epoch];
}

struct ItemLoss {
  double l_fm = 0.0;
  double l_ssl = 0.0;
};

// Composite loss for one item on the tape; returns the total node scaled by
// `weight` and the unscaled parts.
template <typename T>
Var<T> item_loss(Tape<T>& tape, const TrainState<T>& state, const TrainItem& item, const ConditionBundle& cond,
                 double t, const Matrix<T>& z, const TrainConfig& cfg, T weight, ItemLoss& parts) {
  const auto& model = state.model;
  const WeightSource<T> w = model.weights(state.adapter(), !state.lora.has_value());
  const double sigma = sigma_from_t(t, cfg.shift);
  const Matrix<T> x0 = item.tokens.template cast<T>();
  const Matrix<T> x_noisy = make_noisy(x0, z, sigma);
  DitOutput<T> out = model.dit().forward(tape, w, x_noisy, t, cond);
  Var<T> fm = fm_loss(out.velocity, sigma, x_noisy, x0);
  const Matrix<T> mert = item.mert.template cast<T>(), hubert = item.hubert.template cast<T>();
  SslTerms<T> ssl = ssl_loss(tape, w, out.hidden[static_cast<std::size_t>(model.config().repa_tap() - 1)], mert,
                             hubert, cfg.weights);
  parts.l_fm = static_cast<double>(fm.value()(0, 0));
  parts.l_ssl = static_cast<double>(ssl.loss.value()(0, 0));
  return scale(total_loss(fm, ssl.loss, cfg.weights.lambda_ssl), weight);
}

// One optimizer step (state.step + 1). Per-item graphs are averaged.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const std::vector<TrainItem>& data, const TrainConfig& config) {
  const TrainConfig cfg = config.resolved();
  const long k = state.step + 1;
  const auto batch = batch_for_step(item_lengths(data), cfg.batch, cfg.seed, k);
  Rng rng(derive_seed(cfg.seed, 0x57e9, static_cast<std::uint64_t>(k)));
  ParamStore<T>& params = state.trainable();

  StepMetrics m;
  m.step = k;
  m.lr = lr_at(k, cfg.opt.lr, cfg.warmup_steps);
  std::vector<Matrix<T>> grads;
  const T weight = T(1) / static_cast<T>(batch.size());
  for (std::size_t idx : batch) {
    const TrainItem& item = data[idx];
    const ConditionBundle cond = apply_condition_dropout(item.cond, rng, cfg.dropout, cfg.omit_speaker);
    m.drops[0] += cond.dropped.global;
    m.drops[1] += cond.dropped.text;
    m.drops[2] += cond.dropped.lyric;
    m.drops[3] += cond.dropped.speaker;
    const double t = sample_timestep(rng);
    const Matrix<T> z = rng.normal_matrix<T>(item.tokens.rows(), item.tokens.cols());
    Tape<T> tape;
    ItemLoss parts;
    Var<T> loss = item_loss(tape, state, item, cond, t, z, cfg, weight, parts);
    require(std::isfinite(parts.l_fm) && std::isfinite(parts.l_ssl), ErrorKind::kNonFinite,
            "training diverged at step " + std::to_string(k) + ": l_fm=" + std::to_string(parts.l_fm) +
                " l_ssl=" + std::to_string(parts.l_ssl));
    tape.backward(loss);
    auto g = collect_grads(tape, params);
    if (grads.empty()) {
      grads = std::move(g);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) grads[i] += g[i];
    }
    m.l_fm += parts.l_fm / static_cast<double>(batch.size());
    m.l_ssl += parts.l_ssl / static_cast<double>(batch.size());
  }
  m.grad_norm = clip_gradients(grads, cfg.clip_norm);
  adamw_update(params, state.opt, grads, cfg.opt, m.lr);
  state.step = k;
  return m;
}

// Trains until state.step == last_step.
template <typename T>
std::vector<StepMetrics> train(TrainState<T>& state, const std::vector<TrainItem>& data, const TrainConfig& cfg,
                               long last_step, const std::function<void(const StepMetrics&)>& on_step = {}) {
  require(!data.empty(), ErrorKind::kInvalidArgument, "train: empty dataset");
  std::vector<StepMetrics> log;
  while (state.step < last_step) {
    log.push_back(train_step(state, data, cfg));
    if (on_step) on_step(log.back());
  }
  return log;
}

// Flow-matching loss averaged over the dataset with fixed timesteps and noise
// drawn from `seed`; conditions are left intact.
template <typename T>
double evaluate_fm_loss(const Denoiser<T>& model, const std::type_identity_t<LoraAdapter<T>>* lora, const std::vector<TrainItem>& data,
                        double shift, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(derive_seed(seed, 0xe7a1, i));
    const double t = sample_timestep(rng);
    const double sigma = sigma_from_t(t, shift);
    const Matrix<T> x0 = data[i].tokens.template cast<T>();
    const Matrix<T> z = rng.normal_matrix<T>(x0.rows(), x0.cols());
    const Matrix<T> x_noisy = make_noisy(x0, z, sigma);
    Tape<T> tape(false);
    DitOutput<T> out = model.dit().forward(tape, model.weights(lora, false), x_noisy, t, data[i].cond);
    total += static_cast<double>(fm_loss(out.velocity, sigma, x_noisy, x0).value()(0, 0));
  }
  return total / static_cast<double>(data.size());
}

}  // namespace acestep
