#pragma once

// Flow-matching objective with shifted logit-normal timesteps, and the
// representation-alignment loss against two frozen pseudo-teachers.

#include "acestep/autodiff.hpp"
#include "acestep/dcae.hpp"
#include "acestep/lora.hpp"
#include "acestep/params.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace acestep {

// ---------------------------------------------------------------------------
// Noise schedule

inline double sigma_from_t(double t, double shift) {
  require(t >= 0.0 && t <= 1.0, ErrorKind::kInvalidArgument, "sigma_from_t: t must lie in [0, 1]");
  require(shift > 0.0, ErrorKind::kInvalidArgument, "sigma_from_t: shift must be positive");
  return shift * t / (1.0 + (shift - 1.0) * t);
}

inline double t_from_sigma(double sigma, double shift) {
  return sigma / (shift - (shift - 1.0) * sigma);
}

// t = logistic(u), u ~ N(0, 1).
inline double sample_timestep(Rng& rng) {
  const double u = rng.normal();
  return 1.0 / (1.0 + std::exp(-u));
}

// P(sigma_t <= s) for logit-normal t pushed through the shift map.
inline double sigma_cdf(double sigma, double shift) {
  if (sigma <= 0.0) return 0.0;
  if (sigma >= 1.0) return 1.0;
  const double t = t_from_sigma(sigma, shift);
  return 0.5 * std::erfc(-std::log(t / (1.0 - t)) / std::sqrt(2.0));
}

// ---------------------------------------------------------------------------
// Interpolation path

template <typename T>
Matrix<T> make_noisy(const Matrix<T>& x0, const Matrix<T>& z, double sigma) {
  require(x0.rows() == z.rows() && x0.cols() == z.cols(), ErrorKind::kShapeMismatch,
          "make_noisy: x0 " + shape_str(x0.rows(), x0.cols()) + " vs z " + shape_str(z.rows(), z.cols()));
  const T s = static_cast<T>(sigma);
  return (T(1) - s) * x0 + s * z;
}

template <typename T>
Matrix<T> fm_target(const Matrix<T>& x0, const Matrix<T>& z) {
  require(x0.rows() == z.rows() && x0.cols() == z.cols(), ErrorKind::kShapeMismatch, "fm_target: shape mismatch");
  return z - x0;
}

template <typename T>
Matrix<T> precondition_x0(const Matrix<T>& v_out, double sigma, const Matrix<T>& x_noisy) {
  require(v_out.rows() == x_noisy.rows() && v_out.cols() == x_noisy.cols(), ErrorKind::kShapeMismatch,
          "precondition_x0: shape mismatch");
  return v_out * static_cast<T>(-sigma) + x_noisy;
}

// mean ||v (-sigma) + x_noisy - x0||^2 on the tape.
template <typename T>
Var<T> fm_loss(Var<T> v_out, double sigma, const Matrix<T>& x_noisy, const Matrix<T>& x0) {
  Tape<T>& tape = *v_out.tape();
  require(v_out.rows() == x0.rows() && v_out.cols() == x0.cols(), ErrorKind::kShapeMismatch,
          "fm_loss: velocity " + shape_str(v_out.rows(), v_out.cols()) + " vs x0 " + shape_str(x0.rows(), x0.cols()));
  Var<T> pred = scale(v_out, static_cast<T>(-sigma)) + tape.constant(x_noisy);
  return mean(square(pred - tape.constant(x0)));
}

// ---------------------------------------------------------------------------
// Pseudo-teachers

struct TeacherSpec {
  std::string name;
  Index dim = 0;
  double rate_hz = 0.0;
  double chunk_s = 0.0;
  std::uint64_t seed = 0;
  double low_band_weight = 1.0;  // multiplier on bins below the vocal band
};

inline TeacherSpec mert_proxy() { return {"mert_proxy", 1024, 75.0, 5.0, 0x3e47, 1.0}; }
inline TeacherSpec hubert_proxy() { return {"hubert_proxy", 768, 50.0, 30.0, 0x4b3e, 0.25}; }

inline Index teacher_frames(const MelSpectrogram& mel, const TeacherSpec& spec) {
  const Index valid = mel.valid_frames > 0 ? mel.valid_frames : mel.frames();
  return std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(valid) / mel.frame_rate_hz * spec.rate_hz)));
}

// Frozen random projection of the mel, resampled to the teacher rate and
// evaluated chunk by chunk: each chunk interpolates mel rows at its frame
// centres (clamped to the chunk), projects through tanh, and subtracts the
// chunk mean. Returns [frames x dim].
inline Matrix<float> teacher_features(const MelSpectrogram& mel, const TeacherSpec& spec) {
  require(mel.frames() >= 1 && mel.bins() >= 1, ErrorKind::kInvalidArgument, "teacher_features: empty mel");
  const Index bins = mel.bins();
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(bins)));
  Matrix<double> w = rng.normal_matrix<double>(spec.dim, bins);
  for (Index f = 0; f < std::min<Index>(bins, kVocalBandStart); ++f) w.col(f) *= spec.low_band_weight;
  const double gain = 2.0 / std::sqrt(static_cast<double>(bins));

  const Index valid = mel.valid_frames > 0 ? mel.valid_frames : mel.frames();
  const Index total = teacher_frames(mel, spec);
  const Index per_chunk = std::max<Index>(1, static_cast<Index>(std::llround(spec.chunk_s * spec.rate_hz)));
  Matrix<float> out(total, spec.dim);
  for (Index j0 = 0; j0 < total; j0 += per_chunk) {
    const Index j1 = std::min(total, j0 + per_chunk);
    const double lo = std::floor(static_cast<double>(j0) / spec.rate_hz * mel.frame_rate_hz);
    const double hi = std::min(static_cast<double>(valid - 1),
                               std::ceil(static_cast<double>(j1) / spec.rate_hz * mel.frame_rate_hz) - 1.0);
    Matrix<double> x(j1 - j0, bins);
    for (Index j = j0; j < j1; ++j) {
      double p = (static_cast<double>(j) + 0.5) / spec.rate_hz * mel.frame_rate_hz - 0.5;
      p = std::clamp(p, std::min(lo, hi), hi);
      const Index a = static_cast<Index>(std::floor(p));
      const Index b = std::min<Index>(a + 1, valid - 1);
      const double frac = p - static_cast<double>(a);
      x.row(j - j0) = (1.0 - frac) * mel.data.row(a).cast<double>() + frac * mel.data.row(b).cast<double>();
    }
    Matrix<double> feats = (gain * (x * w.transpose())).array().tanh();
    const Eigen::RowVectorXd mu = feats.colwise().mean();
    feats.rowwise() -= mu;
    out.middleRows(j0, j1 - j0) = feats.cast<float>();
  }
  return out;
}

// [dst x src] linear-interpolation matrix along time; endpoints map to
// endpoints, a single output samples the midpoint.
template <typename T>
Matrix<T> interpolation_matrix(Index src_len, Index dst_len) {
  require(src_len >= 1 && dst_len >= 1, ErrorKind::kInvalidArgument, "temporal_align: lengths must be >= 1");
  Matrix<T> m = Matrix<T>::Zero(dst_len, src_len);
  for (Index i = 0; i < dst_len; ++i) {
    const double p = dst_len == 1 ? 0.5 * static_cast<double>(src_len - 1)
                                  : static_cast<double>(i) * static_cast<double>(src_len - 1) / static_cast<double>(dst_len - 1);
    const Index a = std::min<Index>(static_cast<Index>(std::floor(p)), src_len - 1);
    const Index b = std::min<Index>(a + 1, src_len - 1);
    const double frac = p - static_cast<double>(a);
    m(i, a) += static_cast<T>(1.0 - frac);
    if (frac > 0.0) m(i, b) += static_cast<T>(frac);
  }
  return m;
}

template <typename T>
Matrix<T> temporal_align(const Matrix<T>& features, Index target_len) {
  if (target_len == features.rows()) return features;
  return interpolation_matrix<T>(features.rows(), target_len) * features;
}

template <typename T>
Var<T> temporal_align(Var<T> features, Index target_len) {
  if (target_len == features.rows()) return features;
  Tape<T>& tape = *features.tape();
  return matmul(tape.constant(interpolation_matrix<T>(features.rows(), target_len)), features);
}

// ---------------------------------------------------------------------------
// Alignment loss

struct LossWeights {
  double lambda_ssl = 1.0;
  double w_mert = 1.0;
  double w_hubert = 1.0;    // finetune: 0.01
};

inline constexpr double kCosineEps = 1e-8;

template <typename T>
struct SslTerms {
  Var<T> loss;
  double cos_mert = 0.0;
  double cos_hubert = 0.0;
};

template <typename T>
void init_ssl_heads(ParamStore<T>& params, Index model_dim, Rng& rng) {
  init_linear(params.add("ssl.mert_proj.w", mert_proxy().dim, model_dim), rng);
  params.add("ssl.mert_proj.b", 1, mert_proxy().dim);
  init_linear(params.add("ssl.hubert_proj.w", hubert_proxy().dim, model_dim), rng);
  params.add("ssl.hubert_proj.b", 1, hubert_proxy().dim);
}

// Mean cosine similarity between two [T' x dim] sequences over frames whose
// norms both exceed the guard; 0 when no frame qualifies.
template <typename T>
Var<T> mean_cosine(Var<T> a, Var<T> b) {
  std::vector<char> valid;
  Var<T> c = row_cosine(a, b, static_cast<T>(kCosineEps), &valid);
  const auto n = std::count(valid.begin(), valid.end(), char(1));
  return scale(sum(c), n > 0 ? T(1) / static_cast<T>(n) : T(0));
}

// L = (w_mert (1 - c_mert) + w_hubert (1 - c_hubert)) / 2, where each c is the
// mean cosine between a trainable projection of the tapped hidden state and
// the teacher features, both resampled to the shorter length.
template <typename T>
SslTerms<T> ssl_loss(Tape<T>& tape, const WeightSource<T>& w, Var<T> hidden, const Matrix<T>& mert,
                     const Matrix<T>& hubert, const LossWeights& weights) {
  auto term = [&](const std::string& head, const Matrix<T>& teacher) {
    Var<T> proj = linear(hidden, w(tape, "ssl." + head + ".w"), w(tape, "ssl." + head + ".b"));
    require(proj.cols() == teacher.cols(), ErrorKind::kShapeMismatch, "ssl_loss: teacher width mismatch for " + head);
    const Index len = std::min(proj.rows(), teacher.rows());
    Var<T> t = tape.constant(temporal_align(teacher, len));
    return mean_cosine(temporal_align(proj, len), t);
  };
  Var<T> cm = term("mert_proj", mert);
  Var<T> ch = term("hubert_proj", hubert);
  SslTerms<T> out;
  out.cos_mert = static_cast<double>(cm.value()(0, 0));
  out.cos_hubert = static_cast<double>(ch.value()(0, 0));
  const T wm = static_cast<T>(weights.w_mert), wh = static_cast<T>(weights.w_hubert);
  // (wm + wh)/2 - (wm cm + wh ch)/2
  Var<T> weighted = scale(cm, -wm / T(2)) + scale(ch, -wh / T(2));
  out.loss = add_scalar(weighted, (wm + wh) / T(2));
  return out;
}

template <typename T>
Var<T> total_loss(Var<T> fm, Var<T> ssl, double lambda_ssl) {
  if (lambda_ssl == 0.0) return fm;
  return fm + scale(ssl, static_cast<T>(lambda_ssl));
}

inline double total_loss(double fm, double ssl, double lambda_ssl) { return fm + lambda_ssl * ssl; }

}  // namespace acestep
