#pragma once

// Linear diffusion transformer: patchified latent tokens, linear self-attention
// with AdaLN-single modulation, softmax cross-attention over the condition
// sequence, and a depthwise 1-D convolutional feed-forward.

#include "acestep/autodiff.hpp"
#include "acestep/conditioning.hpp"
#include "acestep/dcae.hpp"
#include "acestep/lora.hpp"
#include "acestep/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace acestep {

// ---------------------------------------------------------------------------
// Patchification: one token per latent time frame, holding the (channel, freq)
// column. tokens(t, c*F + f) = latent(c, f*T + t).

inline Matrix<float> patchify(const Latent& latent) {
  require(latent.channels() == kLatentChannels, ErrorKind::kShapeMismatch,
          "patchify: latent must have 8 channels, got " + std::to_string(latent.channels()));
  require(latent.data.cols() == latent.freq * latent.time && latent.time >= 1, ErrorKind::kShapeMismatch,
          "patchify: latent size does not match freq x time");
  const Index f_lat = latent.freq, t_lat = latent.time;
  Matrix<float> tokens(t_lat, kLatentChannels * f_lat);
  for (Index c = 0; c < kLatentChannels; ++c)
    for (Index f = 0; f < f_lat; ++f)
      for (Index t = 0; t < t_lat; ++t) tokens(t, c * f_lat + f) = latent.data(c, f * t_lat + t);
  return tokens;
}

inline Latent unpatchify(const Matrix<float>& tokens, Index freq, double latent_rate_hz = kMelFrameRateHz / kCompression) {
  require(tokens.cols() == kLatentChannels * freq, ErrorKind::kShapeMismatch,
          "unpatchify: token width " + std::to_string(tokens.cols()) + " != 8 x " + std::to_string(freq));
  Latent out;
  out.freq = freq;
  out.time = tokens.rows();
  out.latent_rate_hz = latent_rate_hz;
  out.data.resize(kLatentChannels, freq * out.time);
  for (Index c = 0; c < kLatentChannels; ++c)
    for (Index f = 0; f < freq; ++f)
      for (Index t = 0; t < out.time; ++t) out.data(c, f * out.time + t) = tokens(t, c * freq + f);
  return out;
}

// ---------------------------------------------------------------------------
// Attention kernels

inline constexpr double kLinearAttentionEps = 1e-6;

// phi(q) [phi(k)^T v] / (phi(q) [phi(k)^T 1] + eps), phi = elu + 1, on plain
// matrices. Cost is linear in the sequence length.
template <typename T>
Matrix<T> linear_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
  require(q.rows() == k.rows() && k.rows() == v.rows() && q.cols() == k.cols(), ErrorKind::kShapeMismatch,
          "linear_attention: q/k/v shapes disagree");
  auto phi = [](const Matrix<T>& x) -> Matrix<T> {
    return x.unaryExpr([](T a) { return a > T(0) ? a + T(1) : std::exp(a); });
  };
  const Matrix<T> pq = phi(q), pk = phi(k);
  Matrix<T> kv;
  kv.noalias() = pk.transpose() * v;
  Matrix<T> num;
  num.noalias() = pq * kv;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> den = (pq * pk.colwise().sum().transpose()).array() + T(kLinearAttentionEps);
  return num.array().colwise() / den.array();
}

// Quadratic softmax attention reference, for comparisons.
template <typename T>
Matrix<T> softmax_attention_reference(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
  Matrix<T> s;
  s.noalias() = q * k.transpose();
  s /= std::sqrt(static_cast<T>(q.cols()));
  for (Index i = 0; i < s.rows(); ++i) {
    s.row(i).array() -= s.row(i).maxCoeff();
    s.row(i) = s.row(i).array().exp();
    s.row(i) /= s.row(i).sum();
  }
  return s * v;
}

// Multi-head linear attention on the tape. Rotary phases (when positions are
// given) enter the numerator only, so the normalizer stays positive; with
// equal positions and one token the output is v up to eps.
template <typename T>
Var<T> linear_attention(Var<T> q, Var<T> k, Var<T> v, int heads, const std::vector<T>* positions = nullptr,
                        T rope_base = T(10000)) {
  require(q.rows() == k.rows() && k.rows() == v.rows() && q.cols() == k.cols() && q.cols() % heads == 0,
          ErrorKind::kShapeMismatch, "linear_attention: q/k/v shapes disagree");
  const Index dh = q.cols() / heads;
  const Index dv = v.cols() / heads;
  std::vector<Var<T>> outs;
  for (int h = 0; h < heads; ++h) {
    Var<T> pq = elu_plus_one(slice_cols(q, h * dh, dh));
    Var<T> pk = elu_plus_one(slice_cols(k, h * dh, dh));
    Var<T> vh = slice_cols(v, h * dv, dv);
    Var<T> rq = positions ? rope(pq, *positions, dh, dh, rope_base) : pq;
    Var<T> rk = positions ? rope(pk, *positions, dh, dh, rope_base) : pk;
    Var<T> num = matmul(rq, matmul_tn(rk, vh));
    Var<T> den = add_scalar(matmul_nt(pq, sum_rows(pk)), T(kLinearAttentionEps));
    outs.push_back(div_col(num, den));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

// ---------------------------------------------------------------------------
// Model

struct DitConfig {
  Index latent_bins = kMelBins / kCompression;  // F_lat
  Index model_dim = 128;
  int blocks = 8;
  int heads = 4;
  int ffn_expansion = 2;
  Index time_freq_dim = 256;
  double rope_base = 10000.0;
  // Rotary position of lyric key i in cross-attention is cross_rope_rate * i
  // latent frames; text and speaker keys sit at 0. Half of each head's
  // channels are rotated, the rest are position-free.
  double cross_rope_rate = 4.0;
  ConditionConfig cond;

  Index token_dim() const { return kLatentChannels * latent_bins; }
  // 1-based index of the block whose output feeds the alignment loss
  // (8 of 24 at full scale).
  int repa_tap() const { return (blocks + 2) / 3; }
};

// Sinusoidal features of t * 1000: [cos(w_i s), sin(w_i s)], w_i = 10000^(-i/half).
template <typename T>
Matrix<T> timestep_features(double t, Index dim) {
  const Index half = dim / 2;
  Matrix<T> out = Matrix<T>::Zero(1, dim);
  const double s = t * 1000.0;
  for (Index i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out(0, i) = static_cast<T>(std::cos(w * s));
    out(0, half + i) = static_cast<T>(std::sin(w * s));
  }
  return out;
}

template <typename T>
struct DitOutput {
  Var<T> velocity;            // [L x token_dim]
  std::vector<Var<T>> hidden;  // hidden[k-1] is the output of block k
  std::vector<Var<T>> modulation;  // per block [1 x 6D]
};

template <typename T>
class LinearDit {
 public:
  explicit LinearDit(const DitConfig& cfg) : cfg_(cfg), cond_(cfg.cond) {
    require(cfg.blocks >= 1 && cfg.heads >= 1 && cfg.model_dim % cfg.heads == 0 && (cfg.model_dim / cfg.heads) % 4 == 0,
            ErrorKind::kConfig, "dit: model_dim must split into heads whose width is a multiple of 4");
    require(cfg.cond.model_dim == cfg.model_dim, ErrorKind::kConfig, "dit: condition width must equal model_dim");
  }

  const DitConfig& config() const { return cfg_; }
  const ConditionEncoder<T>& condition_encoder() const { return cond_; }

  void init(ParamStore<T>& params, Rng& rng) const {
    const Index d = cfg_.model_dim, e = cfg_.ffn_expansion * d;
    cond_.init(params, rng);
    init_linear(params.add("dit.patch_in.w", d, cfg_.token_dim()), rng);
    params.add("dit.patch_in.b", 1, d);
    init_linear(params.add("dit.time.mlp1.w", d, cfg_.time_freq_dim), rng);
    params.add("dit.time.mlp1.b", 1, d);
    init_linear(params.add("dit.time.mlp2.w", d, d), rng);
    params.add("dit.time.mlp2.b", 1, d);
    // AdaLN-single: the only timestep-to-modulation network, zero at start.
    params.add("dit.adaln.w", 6 * d, d);
    params.add("dit.adaln.b", 1, 6 * d);
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string p = block_prefix(b);
      params.add(p + ".mod_offset", 1, 6 * d);
      for (const char* path : {".attn", ".cross"})
        for (const char* m : {".q", ".k", ".v", ".o"}) {
          init_linear(params.add(p + path + m + ".w", d, d), rng);
          params.add(p + path + m + ".b", 1, d);
        }
      init_linear(params.add(p + ".ffn.w1", e, d), rng);
      params.add(p + ".ffn.b1", 1, e);
      init_normal(params.add(p + ".ffn.dw", 3, e), rng, 1.0 / std::sqrt(3.0));
      init_linear(params.add(p + ".ffn.w2", d, e), rng);
      params.add(p + ".ffn.b2", 1, d);
    }
    init_normal(params.add("dit.final.table", 1, 2 * d), rng, 1.0 / std::sqrt(double(d)));
    params.add("dit.out.w", cfg_.token_dim(), d);
    params.add("dit.out.b", 1, cfg_.token_dim());
  }

  // Base modulation from the shared network plus each block's offset.
  std::vector<Var<T>> adaln_single(Tape<T>& tape, const WeightSource<T>& w, Var<T> temb) const {
    Var<T> base = linear(silu(temb), w(tape, "dit.adaln.w"), w(tape, "dit.adaln.b"));
    std::vector<Var<T>> out;
    for (int b = 0; b < cfg_.blocks; ++b) out.push_back(base + w(tape, block_prefix(b) + ".mod_offset"));
    return out;
  }

  Var<T> timestep_embedding(Tape<T>& tape, const WeightSource<T>& w, double t) const {
    require(t >= 0.0 && t <= 1.0, ErrorKind::kInvalidArgument, "timestep must lie in [0, 1]");
    Var<T> f = tape.constant(timestep_features<T>(t, cfg_.time_freq_dim));
    Var<T> h = silu(linear(f, w(tape, "dit.time.mlp1.w"), w(tape, "dit.time.mlp1.b")));
    return linear(h, w(tape, "dit.time.mlp2.w"), w(tape, "dit.time.mlp2.b"));
  }

  // Pointwise expansion, depthwise kernel-3 convolution along time, SiLU,
  // pointwise projection.
  Var<T> ffn_1d(Tape<T>& tape, const WeightSource<T>& w, const std::string& prefix, Var<T> x) const {
    Var<T> h = linear(x, w(tape, prefix + ".w1"), w(tape, prefix + ".b1"));
    h = silu(depthwise_conv1d(h, w(tape, prefix + ".dw")));
    return linear(h, w(tape, prefix + ".w2"), w(tape, prefix + ".b2"));
  }

  // tokens: [L x token_dim] noisy latent tokens; t in [0, 1].
  DitOutput<T> forward(Tape<T>& tape, const WeightSource<T>& w, const Matrix<T>& tokens, double t,
                       const ConditionBundle& cond) const {
    require(tokens.rows() >= 1 && tokens.rows() <= kMaxLatentFrames, ErrorKind::kBudgetExceeded,
            "latent length " + std::to_string(tokens.rows()) + " outside 1.." + std::to_string(kMaxLatentFrames));
    require(tokens.cols() == cfg_.token_dim(), ErrorKind::kShapeMismatch,
            "dit: token width " + std::to_string(tokens.cols()) + " != " + std::to_string(cfg_.token_dim()));
    const EncodedCondition<T> enc = cond_.encode(tape, w, cond, cfg_.cross_rope_rate);
    return forward(tape, w, tape.constant(tokens), t, enc);
  }

  DitOutput<T> forward(Tape<T>& tape, const WeightSource<T>& w, Var<T> tokens, double t,
                       const EncodedCondition<T>& enc) const {
    const Index d = cfg_.model_dim, len = tokens.rows();
    const Index dh = d / cfg_.heads;
    const T base = static_cast<T>(cfg_.rope_base);
    std::vector<T> pos(static_cast<std::size_t>(len));
    for (Index i = 0; i < len; ++i) pos[static_cast<std::size_t>(i)] = static_cast<T>(i);

    DitOutput<T> out;
    Var<T> temb = timestep_embedding(tape, w, t);
    out.modulation = adaln_single(tape, w, temb);
    Var<T> x = linear(tokens, w(tape, "dit.patch_in.w"), w(tape, "dit.patch_in.b"));

    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string p = block_prefix(b);
      Var<T> mod = out.modulation[static_cast<std::size_t>(b)];
      auto chunk = [&](int i) { return slice_cols(mod, i * d, d); };

      Var<T> h = add_row(mul_row(layer_norm_rows(x), add_scalar(chunk(1), T(1))), chunk(0));
      Var<T> q = linear(h, w(tape, p + ".attn.q.w"), w(tape, p + ".attn.q.b"));
      Var<T> k = linear(h, w(tape, p + ".attn.k.w"), w(tape, p + ".attn.k.b"));
      Var<T> v = linear(h, w(tape, p + ".attn.v.w"), w(tape, p + ".attn.v.b"));
      Var<T> a = linear(linear_attention(q, k, v, cfg_.heads, &pos, base), w(tape, p + ".attn.o.w"),
                        w(tape, p + ".attn.o.b"));
      x = x + mul_row(a, chunk(2));

      h = layer_norm_rows(x);
      q = rope(linear(h, w(tape, p + ".cross.q.w"), w(tape, p + ".cross.q.b")), pos, dh, dh / 2, base);
      k = rope(linear(enc.sequence, w(tape, p + ".cross.k.w"), w(tape, p + ".cross.k.b")), enc.positions, dh, dh / 2,
               base);
      v = linear(enc.sequence, w(tape, p + ".cross.v.w"), w(tape, p + ".cross.v.b"));
      x = x + linear(softmax_attention(q, k, v, cfg_.heads, enc.key_bias), w(tape, p + ".cross.o.w"),
                     w(tape, p + ".cross.o.b"));

      h = add_row(mul_row(layer_norm_rows(x), add_scalar(chunk(4), T(1))), chunk(3));
      x = x + mul_row(ffn_1d(tape, w, p + ".ffn", h), chunk(5));
      out.hidden.push_back(x);
    }

    Var<T> fin = add_row(w(tape, "dit.final.table"), concat_cols(std::vector<Var<T>>{temb, temb}));
    Var<T> h = add_row(mul_row(layer_norm_rows(x), add_scalar(slice_cols(fin, d, d), T(1))), slice_cols(fin, 0, d));
    out.velocity = linear(h, w(tape, "dit.out.w"), w(tape, "dit.out.b"));
    return out;
  }

  // Names of the weights LoRA adapts by default: attention projections.
  std::vector<std::string> lora_targets() const {
    std::vector<std::string> names;
    for (int b = 0; b < cfg_.blocks; ++b)
      for (const char* path : {".attn", ".cross"})
        for (const char* m : {".q", ".k", ".v", ".o"}) names.push_back(block_prefix(b) + path + m + ".w");
    return names;
  }

  static std::string block_prefix(int b) { return "dit.block" + std::to_string(b); }

 private:
  DitConfig cfg_;
  ConditionEncoder<T> cond_;
};

// Scalars in the timestep-modulation machinery of a parameter store: the
// shared network plus every per-block offset.
template <typename T>
std::size_t modulation_param_count(const ParamStore<T>& params) {
  std::size_t n = 0;
  for (const auto& e : params)
    if (e.name.starts_with("dit.adaln.") || e.name.ends_with(".mod_offset")) n += static_cast<std::size_t>(e.value.size());
  return n;
}

}  // namespace acestep
