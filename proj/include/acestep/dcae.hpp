#pragma once

// Mel-spectrogram autoencoder with f8c8 geometry (8x in time and frequency,
// 8 latent channels), the deterministic synthetic song generator that feeds
// it, and its reconstruction-only training loop.

#include "acestep/autodiff.hpp"
#include "acestep/optim.hpp"
#include "acestep/params.hpp"
#include "acestep/tokenizer.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace acestep {

inline constexpr double kMelFrameRateHz = 44100.0 / 512.0;  // ~86.13
inline constexpr int kMelBins = 128;
inline constexpr int kLatentChannels = 8;
inline constexpr int kCompression = 8;

struct MelSpectrogram {
  Matrix<float> data;  // [frames x bins]
  double frame_rate_hz = kMelFrameRateHz;
  int valid_frames = 0;  // frames before right-padding

  Index frames() const { return data.rows(); }
  Index bins() const { return data.cols(); }
  double duration_s() const { return static_cast<double>(frames()) / frame_rate_hz; }
};

struct Latent {
  Matrix<float> data;  // [8 x (freq*time)], element (c, f*time + t)
  Index freq = 0;
  Index time = 0;
  double latent_rate_hz = kMelFrameRateHz / kCompression;

  Index channels() const { return data.rows(); }
};

// Frames needed for a duration, before and after padding to a multiple of 8.
inline Index mel_frames_for(double duration_s, double frame_rate_hz = kMelFrameRateHz) {
  return static_cast<Index>(std::llround(duration_s * frame_rate_hz));
}

inline Index padded_frames(Index frames) { return (frames + kCompression - 1) / kCompression * kCompression; }

// Right-pads with zeros so both dimensions are multiples of 8.
inline MelSpectrogram pad_to_multiple(const MelSpectrogram& mel) {
  MelSpectrogram out = mel;
  const Index t = padded_frames(mel.frames()), f = padded_frames(mel.bins());
  out.data = Matrix<float>::Zero(t, f);
  out.data.topLeftCorner(mel.frames(), mel.bins()) = mel.data;
  out.valid_frames = mel.valid_frames > 0 ? mel.valid_frames : static_cast<int>(mel.frames());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline const std::vector<std::string>& style_tags() {
  static const std::vector<std::string> tags{"pop", "rock", "metal", "jazz", "edm", "folk", "ambient", "blues"};
  return tags;
}

struct SongSpec {
  double duration_s = 2.97;
  int tag_id = 0;
  LyricTokens lyrics;
  std::optional<int> speaker_id;
  std::uint64_t seed = 0;
};

// Layout of the vocal line: one fixed-length slot per content token after a
// short lead-in. Letters and digits sing a burst; whitespace, punctuation and
// structure tags leave their slot silent.
struct VocalLayout {
  static constexpr Index kLeadIn = 16;
  static constexpr Index kSlot = 32;

  struct Burst {
    Index start = 0;  // mel frame
    Index length = kSlot;
    int token = 0;
    int slot = 0;
  };

  Index slots = 0;
  std::vector<Burst> bursts;

  Index frames_needed() const { return slots == 0 ? 0 : kLeadIn + slots * kSlot; }
};

inline VocalLayout vocal_layout(const LyricTokens& lyrics) {
  VocalLayout layout;
  if (is_instrumental(lyrics)) return layout;
  for (int id : lyrics.ids) {
    if (id == kTokBos || id == kTokEos || id == kTokPad) continue;
    const int slot = static_cast<int>(layout.slots++);
    if (is_byte_token(id) && std::isalnum(id)) {
      layout.bursts.push_back({VocalLayout::kLeadIn + slot * VocalLayout::kSlot, VocalLayout::kSlot, id, slot});
    }
  }
  return layout;
}

inline constexpr int kVocalBandStart = 64;

// Deterministic mel for a song. Accompaniment (bins below 64) is a harmonic
// stack whose pitch and pulse rate depend on the style tag; the vocal band
// (bins 64..127) carries one Hann-shaped burst per sung token, at a bin set by
// the token byte and shifted by the speaker timbre.
inline MelSpectrogram synth_mel(const SongSpec& spec) {
  require(spec.duration_s > 0.0, ErrorKind::kInvalidArgument, "song duration must be positive");
  require(spec.tag_id >= 0 && spec.tag_id < static_cast<int>(style_tags().size()), ErrorKind::kInvalidArgument,
          "tag_id outside the synthetic vocabulary");
  const Index raw = mel_frames_for(spec.duration_s);
  const VocalLayout layout = vocal_layout(spec.lyrics);
  require(layout.frames_needed() <= raw, ErrorKind::kInvalidArgument,
          "duration " + std::to_string(spec.duration_s) + " s holds " + std::to_string(raw) + " frames but the lyrics need " +
              std::to_string(layout.frames_needed()));

  Rng rng(derive_seed(spec.seed, 0x5eed));
  const double tag = spec.tag_id;
  const double f0 = 3.0 + 2.0 * tag;
  const double period = kMelFrameRateHz * 60.0 / (80.0 + 12.0 * tag);
  const double phase = rng.uniform() * period;
  const double gain = 0.97 + 0.03 * rng.uniform();
  const double timbre = spec.speaker_id ? 3.0 * (*spec.speaker_id + 1) : 0.0;

  MelSpectrogram mel;
  mel.valid_frames = static_cast<int>(raw);
  mel.data = Matrix<float>::Zero(padded_frames(raw), kMelBins);

  std::vector<double> spectrum(kVocalBandStart, 0.0);
  for (int k = 1; k * f0 < kVocalBandStart; ++k) {
    const double amp = 0.5 / std::pow(k, 0.7);
    for (int f = 0; f < kVocalBandStart; ++f) {
      const double d = (f - k * f0) / 1.5;
      spectrum[f] += amp * std::exp(-0.5 * d * d);
    }
  }
  for (Index t = 0; t < raw; ++t) {
    const double c = std::cos(std::numbers::pi * (t - phase) / period);
    const double env = gain * (0.55 + 0.45 * c * c);
    for (int f = 0; f < kVocalBandStart; ++f) mel.data(t, f) = static_cast<float>(spectrum[f] * env);
  }
  for (const auto& b : layout.bursts) {
    const double center = 70.0 + (b.token * 7) % 36 + timbre;
    for (Index j = 0; j < b.length; ++j) {
      const double s = std::sin(std::numbers::pi * (j + 0.5) / b.length);
      const double env = 0.8 * s * s;
      for (int f = kVocalBandStart; f < kMelBins; ++f) {
        const double d1 = (f - center) / 2.0, d2 = (f - center - 6.0) / 2.0;
        mel.data(b.start + j, f) += static_cast<float>(env * (std::exp(-0.5 * d1 * d1) + 0.4 * std::exp(-0.5 * d2 * d2)));
      }
    }
  }
  mel.data = mel.data.cwiseMax(0.0f).cwiseMin(1.0f);
  return mel;
}

// Mean vocal-band energy per mel frame.
inline std::vector<double> vocal_envelope(const MelSpectrogram& mel) {
  std::vector<double> env(static_cast<std::size_t>(mel.frames()), 0.0);
  for (Index t = 0; t < mel.frames(); ++t)
    env[static_cast<std::size_t>(t)] = mel.data.row(t).segment(kVocalBandStart, mel.bins() - kVocalBandStart).mean();
  return env;
}

// ---------------------------------------------------------------------------
// Autoencoder

struct DcaeConfig {
  Index c1 = 16;  // channels after the first 2x stage
  Index c2 = 32;  // after the second
  Index c3 = 32;  // at latent resolution
};

template <typename T>
class Dcae {
 public:
  Dcae(const DcaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, 0xdcae));
    const Index c1 = cfg.c1, c2 = cfg.c2, c3 = cfg.c3;
    auto lin = [&](const std::string& name, Index out, Index in) {
      init_linear(params.add(name + ".w", out, in), rng);
      params.add(name + ".b", out, 1);
    };
    lin("dcae.enc.down1", c1, 4);
    lin("dcae.enc.down2", c2, 4 * c1);
    lin("dcae.enc.down3", c3, 4 * c2);
    lin("dcae.enc.res1", c3, 9 * c3);
    lin("dcae.enc.res2", c3, 9 * c3);
    lin("dcae.enc.out", kLatentChannels, c3);
    lin("dcae.dec.in", c3, kLatentChannels);
    lin("dcae.dec.res1", c3, 9 * c3);
    lin("dcae.dec.res2", c3, 9 * c3);
    lin("dcae.dec.up3", 4 * c2, c3);
    lin("dcae.dec.up2", 4 * c1, c2);
    lin("dcae.dec.up1", 4, c1);
    params.add("dcae.latent_mean", kLatentChannels, 1, false);
    params.add("dcae.latent_std", kLatentChannels, 1, false).setOnes();
  }

  const DcaeConfig& config() const { return cfg_; }

  // image: [1 x freq*time] (frequency-major). Returns [8 x (freq/8)*(time/8)].
  Var<T> encode(Tape<T>& tape, Var<T> image, Index freq, Index time) const {
    check_dims(freq, time);
    const Index c1 = cfg_.c1, c2 = cfg_.c2, c3 = cfg_.c3;
    Var<T> h = pixel_unshuffle(image, 1, freq, time, 2);
    h = silu(conv1x1(tape, "dcae.enc.down1", h));
    h = pixel_unshuffle(h, c1, freq / 2, time / 2, 2);
    h = silu(conv1x1(tape, "dcae.enc.down2", h));
    h = pixel_unshuffle(h, c2, freq / 4, time / 4, 2);
    h = conv1x1(tape, "dcae.enc.down3", h);
    h = residual(tape, "dcae.enc", h, c3, freq / 8, time / 8);
    Var<T> z = conv1x1(tape, "dcae.enc.out", silu(h));
    Var<T> mean = tape.constant_ref(params.at("dcae.latent_mean"));
    Matrix<T> inv_std = params.at("dcae.latent_std").cwiseInverse();
    Var<T> centered = add_col(z, scale(mean, T(-1)));
    return mul_cols(tape, centered, inv_std);
  }

  Var<T> decode(Tape<T>& tape, Var<T> latent, Index freq_lat, Index time_lat) const {
    require(latent.rows() == kLatentChannels, ErrorKind::kShapeMismatch,
            "decode: latent must have 8 channels, got " + std::to_string(latent.rows()));
    require(latent.cols() == freq_lat * time_lat, ErrorKind::kShapeMismatch, "decode: latent size mismatch");
    const Index c1 = cfg_.c1, c2 = cfg_.c2, c3 = cfg_.c3;
    Var<T> z = mul_cols(tape, latent, params.at("dcae.latent_std"));
    z = add_col(z, tape.constant_ref(params.at("dcae.latent_mean")));
    Var<T> h = conv1x1(tape, "dcae.dec.in", z);
    h = silu(residual(tape, "dcae.dec", h, c3, freq_lat, time_lat));
    h = pixel_shuffle(conv1x1(tape, "dcae.dec.up3", h), c2, freq_lat, time_lat, 2);
    h = pixel_shuffle(conv1x1(tape, "dcae.dec.up2", silu(h)), c1, freq_lat * 2, time_lat * 2, 2);
    return pixel_shuffle(conv1x1(tape, "dcae.dec.up1", silu(h)), 1, freq_lat * 4, time_lat * 4, 2);
  }

  Latent encode(const MelSpectrogram& mel) const {
    require(mel.frames() % kCompression == 0 && mel.bins() % kCompression == 0, ErrorKind::kShapeMismatch,
            "encode: mel " + shape_str(mel.frames(), mel.bins()) + " is not a multiple of 8; pad it first");
    Tape<T> tape(false);
    Var<T> z = encode(tape, tape.constant(mel_to_image(mel)), mel.bins(), mel.frames());
    Latent out;
    out.data = z.value().template cast<float>();
    out.freq = mel.bins() / kCompression;
    out.time = mel.frames() / kCompression;
    out.latent_rate_hz = mel.frame_rate_hz / kCompression;
    require(out.data.allFinite(), ErrorKind::kNonFinite, "encode produced non-finite values");
    return out;
  }

  MelSpectrogram decode(const Latent& latent) const {
    Tape<T> tape(false);
    Var<T> img = decode(tape, tape.constant(latent.data.template cast<T>()), latent.freq, latent.time);
    MelSpectrogram mel;
    mel.frame_rate_hz = latent.latent_rate_hz * kCompression;
    mel.data = image_to_mel(img.value(), latent.freq * kCompression, latent.time * kCompression);
    mel.valid_frames = static_cast<int>(mel.frames());
    return mel;
  }

  static Matrix<T> mel_to_image(const MelSpectrogram& mel) {
    Matrix<T> img = mel.data.transpose().template cast<T>();
    return Eigen::Map<const Matrix<T>>(img.data(), 1, img.size());
  }

  static Matrix<float> image_to_mel(const Matrix<T>& img, Index freq, Index time) {
    Matrix<T> ft = Eigen::Map<const Matrix<T>>(img.data(), freq, time);
    return ft.transpose().template cast<float>();
  }

  ParamStore<T> params;

 private:
  static void check_dims(Index freq, Index time) {
    require(freq % kCompression == 0 && time % kCompression == 0 && freq > 0 && time > 0, ErrorKind::kShapeMismatch,
            "encode: dims " + shape_str(time, freq) + " must be positive multiples of 8; pad the mel first");
  }

  Var<T> conv1x1(Tape<T>& tape, const std::string& name, Var<T> x) const {
    return add_col(matmul(tape.param(params.at(name + ".w")), x), tape.param(params.at(name + ".b")));
  }

  Var<T> conv3x3(Tape<T>& tape, const std::string& name, Var<T> x, Index channels, Index h, Index w) const {
    Conv2dGeometry g{channels, h, w, 3, 1, 1};
    return conv2d(x, tape.param(params.at(name + ".w")), tape.param(params.at(name + ".b")), g);
  }

  Var<T> residual(Tape<T>& tape, const std::string& prefix, Var<T> x, Index channels, Index h, Index w) const {
    Var<T> r = conv3x3(tape, prefix + ".res1", silu(x), channels, h, w);
    r = conv3x3(tape, prefix + ".res2", silu(r), channels, h, w);
    return x + r;
  }

  // Scales row c of x by the constant s(c).
  static Var<T> mul_cols(Tape<T>& tape, Var<T> x, const Matrix<T>& s) {
    Matrix<T> m = s.col(0).replicate(1, x.cols());
    return x * tape.constant(std::move(m));
  }

  DcaeConfig cfg_;
};

// ---------------------------------------------------------------------------
// Phase-1 training: reconstruction MSE only.

struct DcaeTrainConfig {
  DcaeConfig model;
  long steps = 2000;
  int batch = 4;
  double lr = 2e-3;
  std::uint64_t seed = 7;
};

template <typename T>
struct DcaeTrainResult {
  Dcae<T> model;
  std::vector<double> mse;  // per step
};

// Mean squared reconstruction error of one padded mel, as a graph.
template <typename T>
Var<T> reconstruction_mse(Tape<T>& tape, const Dcae<T>& model, const MelSpectrogram& mel) {
  Var<T> image = tape.constant(Dcae<T>::mel_to_image(mel));
  Var<T> z = model.encode(tape, image, mel.bins(), mel.frames());
  Var<T> recon = model.decode(tape, z, mel.bins() / kCompression, mel.frames() / kCompression);
  return mean(square(recon - image));
}

// Sets the per-channel latent normalization from the dataset statistics.
template <typename T>
void fit_latent_stats(Dcae<T>& model, const std::vector<MelSpectrogram>& dataset) {
  model.params.at("dcae.latent_mean").setZero();
  model.params.at("dcae.latent_std").setOnes();
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(kLatentChannels), s2 = Eigen::VectorXd::Zero(kLatentChannels);
  double n = 0.0;
  for (const auto& mel : dataset) {
    const Latent z = model.encode(mel);
    const Matrix<double> d = z.data.cast<double>();
    s1 += d.rowwise().sum();
    s2 += d.array().square().matrix().rowwise().sum();
    n += static_cast<double>(d.cols());
  }
  for (int c = 0; c < kLatentChannels; ++c) {
    const double mu = s1(c) / n;
    const double var = std::max(s2(c) / n - mu * mu, 1e-8);
    model.params.at("dcae.latent_mean")(c, 0) = static_cast<T>(mu);
    model.params.at("dcae.latent_std")(c, 0) = static_cast<T>(std::sqrt(var));
  }
}

template <typename T>
DcaeTrainResult<T> train_dcae(const std::vector<MelSpectrogram>& dataset, const DcaeTrainConfig& cfg,
                              const std::function<void(long, double)>& on_step = {}) {
  require(!dataset.empty(), ErrorKind::kInvalidArgument, "train_dcae: empty dataset");
  require(cfg.batch >= 1, ErrorKind::kInvalidArgument, "train_dcae: batch must be >= 1");
  DcaeTrainResult<T> result{Dcae<T>(cfg.model, cfg.seed), {}};
  Dcae<T>& model = result.model;
  AdamWConfig opt{cfg.lr, 0.9, 0.999, 1e-8, 0.0};
  auto state = AdamWState<T>::zeros_like(model.params);
  for (long step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, 0xba7c, static_cast<std::uint64_t>(step)));
    std::vector<Matrix<T>> grads;
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& mel = dataset[rng.next_u64() % dataset.size()];
      Tape<T> tape;
      Var<T> l = scale(reconstruction_mse(tape, model, mel), T(1) / static_cast<T>(cfg.batch));
      tape.backward(l);
      loss += static_cast<double>(l.value()(0, 0));
      auto g = collect_grads(tape, model.params);
      if (grads.empty()) {
        grads = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) grads[i] += g[i];
      }
    }
    require(std::isfinite(loss), ErrorKind::kNonFinite,
            "DCAE training diverged at step " + std::to_string(step) + " (loss is not finite)");
    result.mse.push_back(loss);
    adamw_update(model.params, state, grads, opt, cfg.lr);
    if (on_step) on_step(step, loss);
  }
  fit_latent_stats(model, dataset);
  return result;
}

}  // namespace acestep
