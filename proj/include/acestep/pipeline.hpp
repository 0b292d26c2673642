#pragma once

// End-to-end plumbing: the synthetic corpus, dataset assembly for the
// denoiser, generation from text and lyrics, and the measurements used by the
// evaluation harness.

#include "acestep/config.hpp"
#include "acestep/dcae.hpp"
#include "acestep/model.hpp"
#include "acestep/objectives.hpp"
#include "acestep/sampler.hpp"
#include "acestep/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace acestep {

struct CorpusSong {
  SongSpec spec;
  std::string tags;
  std::string lyrics;
};

struct CorpusConfig {
  int songs = 64;
  std::uint64_t seed = 1;
  double duration_s = 2.97;
  double short_duration_s = 2.23;
  int short_every = 4;
  int speakers = 4;

  static CorpusConfig from(const RunConfig& rc) {
    return {static_cast<int>(rc.integer("data.songs")), rc.seed("data.seed"), rc.real("data.duration_s"),
            rc.real("data.short_duration_s"), static_cast<int>(rc.integer("data.short_every")),
            static_cast<int>(rc.integer("data.speakers"))};
  }
};

inline int max_slots(double duration_s) {
  const Index frames = mel_frames_for(duration_s);
  return static_cast<int>(std::max<Index>(0, (frames - VocalLayout::kLeadIn) / VocalLayout::kSlot));
}

// Random lyric line with `slots` content tokens: letters sing, spaces rest,
// an optional leading structure tag rests too. Always at least one letter.
inline std::string random_lyrics(Rng& rng, int slots) {
  std::string out;
  int used = 0;
  if (slots >= 3 && rng.uniform() < 0.25) {
    out += "[chorus]";
    ++used;
  }
  bool letter = false;
  for (; used < slots; ++used) {
    const bool last = used == slots - 1;
    if ((!last || letter) && rng.uniform() < 0.3) {
      out.push_back(' ');
    } else {
      out.push_back(static_cast<char>('a' + rng.next_u64() % 26));
      letter = true;
    }
  }
  return out;
}

inline CorpusSong make_song(Rng& rng, double duration_s, int speakers, bool instrumental, std::uint64_t seed) {
  CorpusSong s;
  s.spec.duration_s = duration_s;
  s.spec.tag_id = static_cast<int>(rng.next_u64() % style_tags().size());
  s.spec.seed = seed;
  s.tags = style_tags()[static_cast<std::size_t>(s.spec.tag_id)];
  if (instrumental) {
    s.lyrics = "[inst]";
  } else {
    const int hi = max_slots(duration_s);
    const int lo = std::min(3, hi);
    const int slots = lo + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    s.lyrics = random_lyrics(rng, slots);
    s.spec.speaker_id = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(speakers));
  }
  s.spec.lyrics = tokenize_lyrics(s.lyrics);
  return s;
}

// Training corpus: every `short_every`-th song is short, every 8th is
// instrumental.
inline std::vector<CorpusSong> make_corpus(const CorpusConfig& cfg) {
  require(cfg.songs >= 1, ErrorKind::kInvalidArgument, "corpus needs at least one song");
  std::vector<CorpusSong> out;
  for (int i = 0; i < cfg.songs; ++i) {
    Rng rng(derive_seed(cfg.seed, 0xc0de, static_cast<std::uint64_t>(i)));
    const bool short_song = cfg.short_every > 0 && i % cfg.short_every == cfg.short_every - 1;
    out.push_back(make_song(rng, short_song ? cfg.short_duration_s : cfg.duration_s, cfg.speakers, i % 8 == 7,
                            derive_seed(cfg.seed, 0x50a9, static_cast<std::uint64_t>(i))));
  }
  return out;
}

// Prompts whose lyric lines never occur in the corpus.
inline std::vector<CorpusSong> held_out_prompts(const CorpusConfig& cfg, int count) {
  std::set<std::string> seen;
  for (const auto& s : make_corpus(cfg)) seen.insert(s.lyrics);
  std::vector<CorpusSong> out;
  for (std::uint64_t i = 0; static_cast<int>(out.size()) < count; ++i) {
    Rng rng(derive_seed(cfg.seed, 0x4e1d, i));
    CorpusSong s = make_song(rng, cfg.duration_s, cfg.speakers, false, derive_seed(cfg.seed, 0x4e1e, i));
    if (seen.insert(s.lyrics).second && !vocal_layout(s.spec.lyrics).bursts.empty()) out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<MelSpectrogram> corpus_mels(const std::vector<CorpusSong>& corpus) {
  std::vector<MelSpectrogram> out;
  for (const auto& s : corpus) out.push_back(pad_to_multiple(synth_mel(s.spec)));
  return out;
}

inline ConditionBundle song_condition(const CorpusSong& s) {
  return make_condition(s.tags, s.lyrics, s.spec.speaker_id);
}

template <typename T>
std::vector<TrainItem> build_train_items(const Dcae<T>& dcae, const std::vector<CorpusSong>& corpus,
                                         const std::vector<MelSpectrogram>& mels) {
  require(corpus.size() == mels.size(), ErrorKind::kShapeMismatch, "corpus and mel lists differ in length");
  std::vector<TrainItem> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    TrainItem item;
    item.tokens = patchify(dcae.encode(mels[i]));
    item.cond = song_condition(corpus[i]);
    item.mert = teacher_features(mels[i], mert_proxy());
    item.hubert = teacher_features(mels[i], hubert_proxy());
    out.push_back(std::move(item));
  }
  return out;
}

template <typename T>
VelocityFn velocity_fn(const Denoiser<T>& model, const LoraAdapter<T>* lora = nullptr) {
  return [&model, lora](const Matrix<float>& x, double t, const ConditionBundle& c) { return model.velocity(x, t, c, lora); };
}

inline Index latent_frames_for(double duration_s) { return padded_frames(mel_frames_for(duration_s)) / kCompression; }

// Text + lyrics -> latent tokens -> mel (uncropped, padded to a multiple of 8).
template <typename T>
MelSpectrogram generate(const Denoiser<T>& model, const Dcae<T>& dcae, const ConditionBundle& cond, double duration_s,
                        const SamplerConfig& cfg, const LoraAdapter<T>* lora = nullptr) {
  const Index frames = latent_frames_for(duration_s);
  const Index width = model.config().token_dim();
  const Matrix<float> tokens = ode_sample(velocity_fn(model, lora), frames, width, cond, cfg);
  MelSpectrogram mel = dcae.decode(unpatchify(tokens, model.config().latent_bins));
  mel.valid_frames = static_cast<int>(mel_frames_for(duration_s));
  return mel;
}

// ---------------------------------------------------------------------------
// Measurements

// Chance-corrected share of vocal-band energy inside the expected burst
// windows: (inside - coverage) / (1 - coverage), where coverage is the share
// of frames the windows occupy. 1 = all energy in the windows, 0 = no better
// than energy spread evenly.
inline double localization_score(const MelSpectrogram& mel, const LyricTokens& lyrics) {
  const VocalLayout layout = vocal_layout(lyrics);
  const Index frames = mel.valid_frames > 0 ? mel.valid_frames : mel.frames();
  std::vector<char> inside(static_cast<std::size_t>(frames), 0);
  for (const auto& b : layout.bursts)
    for (Index j = 0; j < b.length && b.start + j < frames; ++j) inside[static_cast<std::size_t>(b.start + j)] = 1;
  const double coverage = static_cast<double>(std::count(inside.begin(), inside.end(), char(1))) / static_cast<double>(frames);
  double in = 0.0, total = 0.0;
  for (Index t = 0; t < frames; ++t) {
    const double e = mel.data.row(t).segment(kVocalBandStart, mel.bins() - kVocalBandStart).cwiseMax(0.0f).sum();
    total += e;
    if (inside[static_cast<std::size_t>(t)]) in += e;
  }
  if (total <= 0.0 || coverage >= 1.0) return 0.0;
  return (in / total - coverage) / (1.0 - coverage);
}

struct LocalizationReport {
  double mean = 0.0;
  std::vector<double> scores;
};

template <typename T>
LocalizationReport evaluate_localization(const Denoiser<T>& model, const Dcae<T>& dcae,
                                         const std::vector<CorpusSong>& prompts, const SamplerConfig& cfg) {
  LocalizationReport r;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SamplerConfig c = cfg;
    c.seed = derive_seed(cfg.seed, 0x10c, i);
    const MelSpectrogram mel = generate(model, dcae, song_condition(prompts[i]), prompts[i].spec.duration_s, c);
    r.scores.push_back(localization_score(mel, prompts[i].spec.lyrics));
    r.mean += r.scores.back() / static_cast<double>(prompts.size());
  }
  return r;
}

// Keep-mask for repainting the span [start_s, end_s): latent frames
// floor(start * rate) .. ceil(end * rate) - 1 are regenerated.
inline std::vector<bool> repaint_mask(double start_s, double end_s, Index frames,
                                      double latent_rate_hz = kMelFrameRateHz / kCompression) {
  require(start_s >= 0.0 && end_s > start_s, ErrorKind::kInvalidArgument, "repaint span must satisfy 0 <= start < end");
  const auto lo = static_cast<Index>(std::floor(start_s * latent_rate_hz));
  const auto hi = std::min<Index>(frames, static_cast<Index>(std::ceil(end_s * latent_rate_hz)));
  require(lo < frames, ErrorKind::kInvalidArgument, "repaint span starts after the end of the latent");
  std::vector<bool> keep(static_cast<std::size_t>(frames), true);
  for (Index t = lo; t < hi; ++t) keep[static_cast<std::size_t>(t)] = false;
  return keep;
}

// Latent frames covered by lyric slot `slot`.
inline std::pair<Index, Index> slot_latent_window(int slot) {
  const Index start = (VocalLayout::kLeadIn + slot * VocalLayout::kSlot) / kCompression;
  return {start, start + VocalLayout::kSlot / kCompression};
}

// Share of the squared latent change that falls inside [lo, hi) frames.
inline double change_localization(const Matrix<float>& before, const Matrix<float>& after, Index lo, Index hi) {
  const Eigen::VectorXd e = (after - before).cast<double>().rowwise().squaredNorm();
  const double total = e.sum();
  if (total <= 0.0) return 0.0;
  return e.segment(lo, hi - lo).sum() / total;
}

}  // namespace acestep
