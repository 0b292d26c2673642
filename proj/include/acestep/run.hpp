#pragma once

// Whole runs driven by a RunConfig: autoencoder training, denoiser training
// and loading the resulting artifacts. Shared by the command-line tool and
// the acceptance harness.

#include "acestep/checkpoint.hpp"
#include "acestep/config.hpp"
#include "acestep/pipeline.hpp"

#include <ostream>
#include <string>
#include <vector>

namespace acestep {

inline Dcae<float> run_train_dcae(const RunConfig& rc, std::ostream* log = nullptr, long log_every = 100) {
  const auto mels = corpus_mels(make_corpus(CorpusConfig::from(rc)));
  auto result = train_dcae<float>(mels, rc.dcae(), [&](long step, double mse) {
    if (log && (step + 1) % log_every == 0) *log << "dcae step=" << step + 1 << " mse=" << mse << "\n";
  });
  return std::move(result.model);
}

inline std::vector<TensorRecord> dcae_records(const Dcae<float>& dcae, const std::string& config_text) {
  std::vector<TensorRecord> out{text_record("meta.config", config_text)};
  append_params(out, dcae.params);
  return out;
}

inline Dcae<float> load_dcae(const std::vector<TensorRecord>& records, const RunConfig& rc) {
  Dcae<float> dcae(rc.dcae().model, rc.dcae().seed);
  load_params(dcae.params, records);
  return dcae;
}

inline TrainState<float> fresh_train_state(const RunConfig& rc) {
  return make_train_state<float>(rc.dit(), rc.train(), rc.seed("dit.seed"));
}

inline std::vector<TrainItem> corpus_items(const RunConfig& rc, const Dcae<float>& dcae) {
  const auto corpus = make_corpus(CorpusConfig::from(rc));
  return build_train_items(dcae, corpus, corpus_mels(corpus));
}

struct LoadedPipeline {
  RunConfig config;
  Dcae<float> dcae;
  TrainState<float> state;
};

// Rebuilds every object from the configuration embedded in the checkpoint.
inline LoadedPipeline load_pipeline(const std::string& path) {
  const auto records = load_container(path);
  RunConfig rc = RunConfig::parse(embedded_config(records));
  Dcae<float> dcae(rc.dcae().model, rc.dcae().seed);
  TrainState<float> state = fresh_train_state(rc);
  restore_pipeline(records, dcae, state);
  return {std::move(rc), std::move(dcae), std::move(state)};
}

}  // namespace acestep
