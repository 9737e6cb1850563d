#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "diffdepth/rng.hpp"
#include "diffdepth/schedule.hpp"
#include "diffdepth/tensor.hpp"

// Depth diffusion in logit space. Normalized depth (0,1) is mapped through
// the logit so noisy latents are unbounded; the inverse squeezes any latent
// back into (0,1), which is what makes out-of-range depths unrepresentable.

namespace diffdepth {

/// Depth values are clamped this far away from {0,1} before the logit.
inline constexpr double kDepthEps = 1e-4;

/// Largest latent magnitude the clamp can produce, log((1-eps)/eps).
inline double latent_limit() { return std::log((1.0 - kDepthEps) / kDepthEps); }

/// logit of depth clamped to [eps, 1-eps]. Input must be normalized depth.
template <typename S>
Tensor<S> to_latent(const Tensor<S>& d_norm) {
  Tensor<S> c = clamp(d_norm, static_cast<S>(kDepthEps), static_cast<S>(1.0 - kDepthEps));
  return sub(log_(c), log_(rsub(S(1), c)));
}

/// Inverse of to_latent. The latent is clamped to the exact range to_latent
/// can emit, so the output always lies in [eps, 1-eps] - strictly inside
/// (0,1) - no matter how far the sampler wandered.
template <typename S>
Tensor<S> from_latent(const Tensor<S>& z) {
  const S lim = static_cast<S>(latent_limit());
  return sigmoid(clamp(z, -lim, lim));
}

/// Forward noising: sqrt(abar_tau) z0 + sqrt(1 - abar_tau) eps.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& z0, int tau, const Tensor<S>& eps, const DiffusionSchedule& sched) {
  if (tau < 1 || tau > sched.t_train())
    throw std::out_of_range("q_sample: tau " + std::to_string(tau) + " outside [1," +
                            std::to_string(sched.t_train()) + "]");
  detail::require_same_shape("q_sample", z0, eps);
  const double ab = sched.alpha_bar(tau);
  return add(scalar_mul(z0, static_cast<S>(std::sqrt(ab))),
             scalar_mul(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

/// Closed-form clean-latent estimate from a noisy latent and predicted noise:
/// (z_tau - sqrt(1-abar) eps_hat) / sqrt(abar). Differentiable; used both by
/// the deterministic sampler and as the training-time depth estimate.
template <typename S>
Tensor<S> predict_z0(const Tensor<S>& z_tau, const Tensor<S>& eps_hat, int tau,
                     const DiffusionSchedule& sched) {
  if (tau < 1 || tau > sched.t_train()) throw std::out_of_range("predict_z0: bad tau " + std::to_string(tau));
  detail::require_same_shape("predict_z0", z_tau, eps_hat);
  const double ab = sched.alpha_bar(tau);
  return scalar_mul(sub(z_tau, scalar_mul(eps_hat, static_cast<S>(std::sqrt(1.0 - ab)))),
                    static_cast<S>(1.0 / std::sqrt(ab)));
}

/// One deterministic (zero-variance) reverse step tau -> tau_prev.
/// tau_prev = 0 returns the clean estimate itself.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& z_tau, const Tensor<S>& eps_hat, int tau, int tau_prev,
                    const DiffusionSchedule& sched) {
  if (!(0 <= tau_prev && tau_prev < tau && tau <= sched.t_train()))
    throw std::out_of_range("ddim_step: need 0 <= tau_prev < tau <= t_train, got " +
                            std::to_string(tau_prev) + " -> " + std::to_string(tau));
  Tensor<S> z0 = predict_z0(z_tau, eps_hat, tau, sched);
  if (tau_prev == 0) return z0;
  const double abp = sched.alpha_bar(tau_prev);
  return add(scalar_mul(z0, static_cast<S>(std::sqrt(abp))),
             scalar_mul(eps_hat, static_cast<S>(std::sqrt(1.0 - abp))));
}

/// Runs the full reverse chain from pure noise and returns the clean latent.
/// `eps_model(z, tau)` predicts the noise. Randomness enters only through the
/// initial latent; the chain itself is deterministic. Always graph-free.
template <typename S>
Tensor<S> denoise_latent(const std::function<Tensor<S>(const Tensor<S>&, int)>& eps_model,
                         const Shape& shape, const DiffusionSchedule& sched, Rng& rng) {
  NoGradGuard ng;
  Tensor<S> z = Tensor<S>::randn(shape, rng);
  const auto& steps = sched.infer_steps();
  for (std::size_t k = steps.size(); k-- > 0;) {
    const int tau = steps[k];
    const int tau_prev = k > 0 ? steps[k - 1] : 0;
    Tensor<S> eps_hat = eps_model(z, tau);
    z = ddim_step(z, eps_hat, tau, tau_prev, sched);
  }
  return z;
}

/// Full sampling chain mapped to normalized depth. With the logit transform
/// enabled the result is strictly inside (0,1); without it the latent is
/// already normalized depth and is returned as-is.
template <typename S>
Tensor<S> denoise_depth(const std::function<Tensor<S>(const Tensor<S>&, int)>& eps_model,
                        const Shape& shape, const DiffusionSchedule& sched, Rng& rng,
                        bool logit_space = true) {
  Tensor<S> z = denoise_latent<S>(eps_model, shape, sched, rng);
  return logit_space ? from_latent(z) : z;
}

}  // namespace diffdepth
