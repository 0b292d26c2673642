#pragma once

// Conditioning paths: frozen hashed text embedder, trainable lyric encoder,
// speaker table, and the conditional-dropout policy used for classifier-free
// guidance.

#include "acestep/autodiff.hpp"
#include "acestep/lora.hpp"
#include "acestep/params.hpp"
#include "acestep/tokenizer.hpp"

#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace acestep {

inline constexpr Index kTextDim = 768;
inline constexpr Index kSpeakerDim = 512;

// Splits a tag string on whitespace and commas.
inline std::vector<std::string> split_tags(std::string_view tags) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : tags) {
    if (c == ',' || std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Frozen text embedder: each tag maps to a fixed pseudo-random unit-scale
// 768-d vector seeded by its hash. Never trained.
inline Matrix<float> embed_text(std::string_view tags) {
  const auto words = split_tags(tags);
  require(words.size() <= static_cast<std::size_t>(kMaxTextTokens), ErrorKind::kBudgetExceeded,
          "text prompt has " + std::to_string(words.size()) + " tokens, over the " + std::to_string(kMaxTextTokens) +
              "-token budget");
  Matrix<float> out(static_cast<Index>(words.size()), kTextDim);
  for (std::size_t i = 0; i < words.size(); ++i) {
    Rng rng(derive_seed(0x7e47, fnv1a(words[i])));
    for (Index j = 0; j < kTextDim; ++j)
      out(static_cast<Index>(i), j) = static_cast<float>(rng.normal() / std::sqrt(double(kTextDim)));
  }
  return out;
}

struct DropFlags {
  bool global = false;
  bool text = false;
  bool lyric = false;
  bool speaker = false;

  bool operator==(const DropFlags&) const = default;
};

struct DropoutRates {
  double global = 0.15;
  double text = 0.15;
  double lyric = 0.15;
  double speaker = 0.50;
};

// Raw conditioning for one song. Encoders run inside the model forward; the
// flags select the null form of each signal.
struct ConditionBundle {
  Matrix<float> text_emb = Matrix<float>(0, kTextDim);  // [L_txt x 768], frozen
  LyricTokens lyrics;
  std::optional<int> speaker_id;
  DropFlags dropped;

  bool text_active() const { return !dropped.global && !dropped.text && text_emb.rows() > 0; }
  bool lyric_active() const { return !dropped.global && !dropped.lyric && !lyrics.ids.empty(); }
  bool speaker_active() const { return !dropped.global && !dropped.speaker && speaker_id.has_value(); }
};

inline ConditionBundle make_condition(std::string_view tags, std::string_view lyrics, std::optional<int> speaker,
                                      std::vector<std::string>* warnings = nullptr) {
  ConditionBundle b;
  b.text_emb = embed_text(tags);
  b.lyrics = tokenize_lyrics(lyrics, warnings);
  b.speaker_id = speaker;
  return b;
}

// Draws the four dropout decisions from rng (always all four, in a fixed
// order). A global drop nulls every signal. `omit_speaker` forces the zero
// speaker vector.
inline ConditionBundle apply_condition_dropout(const ConditionBundle& bundle, Rng& rng, const DropoutRates& rates,
                                               bool omit_speaker = false) {
  ConditionBundle out = bundle;
  const double u_global = rng.uniform(), u_text = rng.uniform(), u_lyric = rng.uniform(), u_speaker = rng.uniform();
  out.dropped.global = bundle.dropped.global || u_global < rates.global;
  out.dropped.text = bundle.dropped.text || out.dropped.global || u_text < rates.text;
  out.dropped.lyric = bundle.dropped.lyric || out.dropped.global || u_lyric < rates.lyric;
  out.dropped.speaker = bundle.dropped.speaker || out.dropped.global || omit_speaker || u_speaker < rates.speaker;
  return out;
}

// The fully dropped bundle, identical to a global drop during training.
inline ConditionBundle unconditional(const ConditionBundle& bundle) {
  ConditionBundle out = bundle;
  out.dropped = DropFlags{true, true, true, true};
  return out;
}

// ---------------------------------------------------------------------------
// Encoders

struct ConditionConfig {
  Index model_dim = 128;
  int heads = 4;
  int lyric_blocks = 2;
  int speakers = 4;
  double rope_base = 10000.0;
};

// Encoded conditioning sequence consumed by cross-attention.
template <typename T>
struct EncodedCondition {
  Var<T> sequence;           // [L_c x D]
  std::vector<T> positions;  // rotary position of every key
  Matrix<T> key_bias;        // [1 x L_c], 0 or a large negative value for masked keys
};

inline constexpr double kMaskedKey = -1e9;

// Softmax multi-head attention. queries [Lq x D], keys/values [Lk x D];
// key_bias [1 x Lk] is added to every score row.
template <typename T>
Var<T> softmax_attention(Var<T> q, Var<T> k, Var<T> v, int heads, const Matrix<T>& key_bias) {
  Tape<T>& tape = *q.tape();
  const Index dh = q.cols() / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  Var<T> bias = tape.constant(key_bias);
  std::vector<Var<T>> outs;
  for (int h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
    Var<T> scores = add_row(scale(matmul_nt(qh, kh), inv), bias);
    outs.push_back(matmul(softmax_rows(scores), vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

template <typename T>
class ConditionEncoder {
 public:
  explicit ConditionEncoder(const ConditionConfig& cfg) : cfg_(cfg) {}

  const ConditionConfig& config() const { return cfg_; }

  void init(ParamStore<T>& params, Rng& rng) const {
    const Index d = cfg_.model_dim;
    init_normal(params.add("cond.lyric.embed", kLyricVocabSize, d), rng, 1.0);
    for (int b = 0; b < cfg_.lyric_blocks; ++b) {
      const std::string p = "cond.lyric.block" + std::to_string(b);
      for (const char* m : {".q", ".k", ".v", ".o"}) {
        init_linear(params.add(p + m + ".w", d, d), rng);
        params.add(p + m + ".b", 1, d);
      }
      init_linear(params.add(p + ".mlp1.w", 2 * d, d), rng);
      params.add(p + ".mlp1.b", 1, 2 * d);
      init_linear(params.add(p + ".mlp2.w", d, 2 * d), rng);
      params.add(p + ".mlp2.b", 1, d);
    }
    init_normal(params.add("cond.lyric.null", 1, d), rng, 1.0);
    init_linear(params.add("cond.text.proj.w", d, kTextDim), rng, std::sqrt(double(kTextDim)));
    params.add("cond.text.proj.b", 1, d);
    init_normal(params.add("cond.text.null", 1, d), rng, 1.0);
    init_normal(params.add("cond.speaker.table", cfg_.speakers, kSpeakerDim), rng, 1.0);
    init_linear(params.add("cond.speaker.proj.w", d, kSpeakerDim), rng);
  }

  // Trainable lyric encoder: embedding table followed by pre-norm
  // self-attention blocks. Output length equals token length; PAD tokens are
  // excluded as keys.
  Var<T> lyric_encode(Tape<T>& tape, const WeightSource<T>& w, const LyricTokens& tokens) const {
    require(tokens.size() <= static_cast<std::size_t>(kMaxLyricTokens), ErrorKind::kBudgetExceeded,
            "lyrics exceed the " + std::to_string(kMaxLyricTokens) + "-token budget");
    require(!tokens.ids.empty(), ErrorKind::kInvalidArgument, "lyric_encode: empty token list");
    const Index len = static_cast<Index>(tokens.size());
    const Index dh = cfg_.model_dim / cfg_.heads;
    Var<T> x = gather_rows(w(tape, "cond.lyric.embed"), tokens.ids);
    const Matrix<T> bias = pad_bias(tokens);
    std::vector<T> pos(static_cast<std::size_t>(len));
    for (Index i = 0; i < len; ++i) pos[static_cast<std::size_t>(i)] = static_cast<T>(i);
    for (int b = 0; b < cfg_.lyric_blocks; ++b) {
      const std::string p = "cond.lyric.block" + std::to_string(b);
      Var<T> h = layer_norm_rows(x);
      Var<T> q = rope(linear(h, w(tape, p + ".q.w"), w(tape, p + ".q.b")), pos, dh, dh, T(cfg_.rope_base));
      Var<T> k = rope(linear(h, w(tape, p + ".k.w"), w(tape, p + ".k.b")), pos, dh, dh, T(cfg_.rope_base));
      Var<T> v = linear(h, w(tape, p + ".v.w"), w(tape, p + ".v.b"));
      x = x + linear(softmax_attention(q, k, v, cfg_.heads, bias), w(tape, p + ".o.w"), w(tape, p + ".o.b"));
      h = layer_norm_rows(x);
      h = linear(silu(linear(h, w(tape, p + ".mlp1.w"), w(tape, p + ".mlp1.b"))), w(tape, p + ".mlp2.w"),
                 w(tape, p + ".mlp2.b"));
      x = x + h;
    }
    return layer_norm_rows(x);
  }

  // Learned row for a known speaker, the exact zero vector when absent.
  static Matrix<T> speaker_embed(const ParamStore<T>& params, std::optional<int> speaker_id) {
    if (!speaker_id) return Matrix<T>::Zero(1, kSpeakerDim);
    const Matrix<T>& table = params.at("cond.speaker.table");
    require(*speaker_id >= 0 && *speaker_id < table.rows(), ErrorKind::kUnknownSpeaker,
            "unknown speaker id " + std::to_string(*speaker_id));
    return table.row(*speaker_id);
  }

  // Concatenated [text; lyrics; speaker] key/value sequence for cross-attention.
  // Text and speaker keys sit at rotary position 0; lyric key i sits at
  // lyric_rate * i so the rotated channels relate lyric order to latent time.
  EncodedCondition<T> encode(Tape<T>& tape, const WeightSource<T>& w, const ConditionBundle& bundle,
                             double lyric_rate) const {
    require(bundle.text_emb.rows() <= kMaxTextTokens, ErrorKind::kBudgetExceeded,
            "text prompt exceeds the " + std::to_string(kMaxTextTokens) + "-token budget");
    require(bundle.lyrics.size() <= static_cast<std::size_t>(kMaxLyricTokens), ErrorKind::kBudgetExceeded,
            "lyrics exceed the " + std::to_string(kMaxLyricTokens) + "-token budget");
    EncodedCondition<T> out;
    std::vector<Var<T>> parts;
    std::vector<T> bias;

    if (bundle.text_active()) {
      Var<T> txt = tape.constant(bundle.text_emb.template cast<T>());
      parts.push_back(linear(txt, w(tape, "cond.text.proj.w"), w(tape, "cond.text.proj.b")));
    } else {
      parts.push_back(w(tape, "cond.text.null"));
    }
    out.positions.assign(static_cast<std::size_t>(parts.back().rows()), T(0));
    bias.assign(static_cast<std::size_t>(parts.back().rows()), T(0));

    if (bundle.lyric_active()) {
      parts.push_back(lyric_encode(tape, w, bundle.lyrics));
      const Matrix<T> pb = pad_bias(bundle.lyrics);
      for (Index i = 0; i < pb.cols(); ++i) {
        out.positions.push_back(static_cast<T>(lyric_rate * static_cast<double>(i)));
        bias.push_back(pb(0, i));
      }
    } else {
      parts.push_back(w(tape, "cond.lyric.null"));
      out.positions.push_back(T(0));
      bias.push_back(T(0));
    }

    const std::optional<int> speaker = bundle.speaker_active() ? bundle.speaker_id : std::nullopt;
    Var<T> spk;
    if (speaker) {
      const Index n = w.base->at("cond.speaker.table").rows();
      require(*speaker >= 0 && *speaker < n, ErrorKind::kUnknownSpeaker, "unknown speaker id " + std::to_string(*speaker));
      spk = gather_rows(w(tape, "cond.speaker.table"), {*speaker});
    } else {
      spk = tape.constant(Matrix<T>::Zero(1, kSpeakerDim));
    }
    parts.push_back(linear(spk, w(tape, "cond.speaker.proj.w")));
    out.positions.push_back(T(0));
    bias.push_back(T(0));

    out.sequence = concat_rows(parts);
    out.key_bias = Eigen::Map<const Matrix<T>>(bias.data(), 1, static_cast<Index>(bias.size()));
    return out;
  }

 private:
  static Matrix<T> pad_bias(const LyricTokens& tokens) {
    Matrix<T> bias = Matrix<T>::Zero(1, static_cast<Index>(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens.ids[i] == kTokPad) bias(0, static_cast<Index>(i)) = static_cast<T>(kMaskedKey);
    return bias;
  }

  ConditionConfig cfg_;
};

}  // namespace acestep
