#pragma once

#include "semantix/denoiser.hpp"
#include "semantix/schedule.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace semantix {

/// Terminal latent plus the per-step noise maps of edit-friendly inversion.
/// noise_maps[t] drives the (t -> prev) transition; empty when eta = 0.
/// Immutable once built; replaying it through the sampling recursion with the
/// same backend and omega reproduces the input.
struct InversionRecord {
  Tensor x_start;
  std::map<int, Tensor> noise_maps;
  TimestepPlan plan;
  Condition condition;
  Real omega = 0.0;
  std::uint64_t seed = 0;
  SigmaVariant sigma_variant = SigmaVariant::PosteriorSqrt;
};

/// Independent diffused latents x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) e_t
/// with e_t drawn independently per plan step (NOT the Markov recursion).
std::map<int, Tensor> diffuse_independent(const Tensor& x0, const Schedule& s,
                                          const TimestepPlan& plan, std::uint64_t seed);

/// mu_hat of the (t -> t_prev) transition, with "alpha_bar_{t-1}" read at
/// t_prev so respaced plans work.
Tensor compute_mu_hat(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                      const Schedule& s, SigmaVariant variant = SigmaVariant::PosteriorSqrt);

/// z = (x_prev - mu_hat) / sigma, elementwise.
Tensor extract_noise(const Tensor& x_prev, const Tensor& mu_hat, Real sigma_t);

InversionRecord invert(const Tensor& x0, const DenoiserBackend& backend, const Condition& c,
                       const Schedule& s, const TimestepPlan& plan, Real cfg_omega,
                       std::uint64_t seed,
                       SigmaVariant variant = SigmaVariant::PosteriorSqrt);

/// Replays the reverse recursion with the stored noise maps; returns the x0
/// estimate.
Tensor reconstruct(const InversionRecord& rec, const DenoiserBackend& backend, const Schedule& s,
                   Real cfg_omega);

// --- record archive ---------------------------------------------------------
// Directory layout: manifest.json + x_start.f32 + z_%06d.f32, raw
// little-endian float32 in [B,C,H,W] order. Round-trips bit-exactly at
// float32 resolution.

void save_record(const InversionRecord& rec, const Schedule& s, const std::string& dir);
InversionRecord load_record(const std::string& dir, Schedule* schedule_out = nullptr);

}  // namespace semantix
