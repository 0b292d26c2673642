#pragma once

// Euler ODE sampling of the learned velocity field with classifier-free
// guidance, and the flow-manipulation controls built on it: noise variations,
// mask-constrained repainting and two-branch flow editing.

#include "acestep/conditioning.hpp"
#include "acestep/objectives.hpp"
#include "acestep/params.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace acestep {

struct SamplerConfig {
  int steps = 30;
  double guidance_scale = 3.0;
  double shift = 3.0;
  std::uint64_t seed = 0;
};

// Velocity field v(x, t, cond) over token-layout latents [T_lat x 8F].
using VelocityFn = std::function<Matrix<float>(const Matrix<float>&, double, const ConditionBundle&)>;

inline Matrix<float> cfg_velocity(const Matrix<float>& v_cond, const Matrix<float>& v_uncond, double scale) {
  require(v_cond.rows() == v_uncond.rows() && v_cond.cols() == v_uncond.cols(), ErrorKind::kShapeMismatch,
          "cfg_velocity: shape mismatch");
  return v_uncond + static_cast<float>(scale) * (v_cond - v_uncond);
}

// Guided velocity; scale 1 and 0 need only one network evaluation.
inline Matrix<float> guided_velocity(const VelocityFn& model, const Matrix<float>& x, double t,
                                     const ConditionBundle& cond, double scale) {
  if (scale == 1.0) return model(x, t, cond);
  const Matrix<float> v_uncond = model(x, t, unconditional(cond));
  if (scale == 0.0) return v_uncond;
  return cfg_velocity(model(x, t, cond), v_uncond, scale);
}

// sigma_i = sigma_from_t(1 - i/steps), i = 0..steps.
inline std::vector<double> sigma_grid(int steps, double shift) {
  std::vector<double> s(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) s[static_cast<std::size_t>(i)] = sigma_from_t(1.0 - double(i) / steps, shift);
  return s;
}

inline Matrix<float> initial_noise(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x2015e));
  return rng.normal_matrix<float>(rows, cols);
}

namespace detail {

inline void validate(const SamplerConfig& cfg) {
  require(cfg.steps >= 1, ErrorKind::kInvalidArgument, "sampler: steps must be >= 1");
  require(cfg.guidance_scale >= 0.0, ErrorKind::kInvalidArgument, "sampler: guidance_scale must be >= 0");
}

inline void check_finite(const Matrix<float>& x, int step) {
  require(x.allFinite(), ErrorKind::kNonFinite, "sampler: non-finite state at step " + std::to_string(step));
}

}  // namespace detail

// Integrates from the given noise (sigma = 1) down to sigma = 0. `after_step`
// may constrain the state after each step; it receives the step's sigma.
inline Matrix<float> integrate(const VelocityFn& model, Matrix<float> x, const ConditionBundle& cond,
                               const SamplerConfig& cfg,
                               const std::function<void(Matrix<float>&, int, double)>& after_step = {}) {
  detail::validate(cfg);
  const auto sigmas = sigma_grid(cfg.steps, cfg.shift);
  for (int i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - double(i) / cfg.steps;
    const Matrix<float> v = guided_velocity(model, x, t, cond, cfg.guidance_scale);
    const float dt = static_cast<float>(sigmas[i + 1] - sigmas[i]);
    x += dt * v;
    if (after_step) after_step(x, i + 1, sigmas[i + 1]);
    detail::check_finite(x, i);
  }
  return x;
}

inline Matrix<float> ode_sample(const VelocityFn& model, const Matrix<float>& noise, const ConditionBundle& cond,
                                const SamplerConfig& cfg) {
  return integrate(model, noise, cond, cfg);
}

inline Matrix<float> ode_sample(const VelocityFn& model, Index frames, Index width, const ConditionBundle& cond,
                                const SamplerConfig& cfg) {
  return ode_sample(model, initial_noise(frames, width, cfg.seed), cond, cfg);
}

// cos(ratio pi/2) z_orig + sin(ratio pi/2) z_new with fresh z_new.
inline Matrix<float> variation_noise(const Matrix<float>& z_orig, double ratio, Rng& rng) {
  require(ratio >= 0.0 && ratio <= 1.0, ErrorKind::kInvalidArgument, "variation ratio must lie in [0, 1]");
  if (ratio == 0.0) return z_orig;
  const Matrix<float> z_new = rng.normal_matrix<float>(z_orig.rows(), z_orig.cols());
  if (ratio == 1.0) return z_new;
  const double a = ratio * std::numbers::pi / 2.0;
  return static_cast<float>(std::cos(a)) * z_orig + static_cast<float>(std::sin(a)) * z_new;
}

// keep[t] == true preserves latent frame t of x_ref; the rest is regenerated.
// The preserved frames follow x_ref's own noising path under a fixed z and
// land on x_ref exactly.
inline Matrix<float> repaint(const VelocityFn& model, const Matrix<float>& x_ref, const std::vector<bool>& keep,
                             const ConditionBundle& cond, const SamplerConfig& cfg) {
  require(static_cast<Index>(keep.size()) == x_ref.rows(), ErrorKind::kShapeMismatch,
          "repaint: mask has " + std::to_string(keep.size()) + " frames, latent has " + std::to_string(x_ref.rows()));
  const Matrix<float> z = initial_noise(x_ref.rows(), x_ref.cols(), cfg.seed);
  auto constrain = [&](Matrix<float>& x, int step, double sigma) {
    for (Index r = 0; r < x.rows(); ++r) {
      if (!keep[static_cast<std::size_t>(r)]) continue;
      if (step == cfg.steps) {
        x.row(r) = x_ref.row(r);
      } else {
        const float s = static_cast<float>(sigma);
        x.row(r) = (1.0f - s) * x_ref.row(r) + s * z.row(r);
      }
    }
  };
  return integrate(model, z, cond, cfg, constrain);
}

// Inversion-free edit. Both branches share the step noise z_i:
//   src_i = (1 - s_i) x_src + s_i z_i,  tgt_i = src_i + (x_tgt - x_src)
//   x_tgt += (s_{i+1} - s_i) (v(tgt_i | cond_tgt) - v(src_i | cond_src))
inline Matrix<float> flow_edit(const VelocityFn& model, const Matrix<float>& x_src, const ConditionBundle& cond_src,
                               const ConditionBundle& cond_tgt, const SamplerConfig& cfg) {
  detail::validate(cfg);
  const auto sigmas = sigma_grid(cfg.steps, cfg.shift);
  Matrix<float> x_tgt = x_src;
  for (int i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - double(i) / cfg.steps;
    Rng rng(derive_seed(cfg.seed, 0xed17, static_cast<std::uint64_t>(i)));
    const Matrix<float> z = rng.normal_matrix<float>(x_src.rows(), x_src.cols());
    const Matrix<float> src = make_noisy(x_src, z, sigmas[i]);
    const Matrix<float> tgt = src + (x_tgt - x_src);
    const Matrix<float> v_src = guided_velocity(model, src, t, cond_src, cfg.guidance_scale);
    const Matrix<float> v_tgt = guided_velocity(model, tgt, t, cond_tgt, cfg.guidance_scale);
    require(v_src.rows() == x_src.rows() && v_tgt.rows() == x_src.rows(), ErrorKind::kShapeMismatch,
            "flow_edit: velocity shape mismatch");
    x_tgt += static_cast<float>(sigmas[i + 1] - sigmas[i]) * (v_tgt - v_src);
    detail::check_finite(x_tgt, i);
  }
  return x_tgt;
}

}  // namespace acestep
