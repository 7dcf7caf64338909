#pragma once

#include "semantix/energy.hpp"
#include "semantix/inversion.hpp"

#include <optional>
#include <vector>

namespace semantix {

/// Classifier-free fusion (1+omega)*eps_cond - omega*eps_uncond, computed as
/// eps_cond + omega*(eps_cond - eps_uncond) so omega = 0 and equal branches
/// return the conditional array bit-exactly.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, Real omega);

/// Renormalises each channel of x_out to the reference's per-channel mean and
/// standard deviation; statistics pool the spatial and frame axes.
Tensor adain_latents(const Tensor& x_out, const Tensor& x_ref, Real eps_std = 1e-5);

/// Per-step energy log record.
struct StepEnergyLog {
  int step = 0;
  int t = 0;
  EnergyBreakdown breakdown;
  Real grad_max_abs = 0.0;
};

/// Three parallel latent tracks advancing through the same plan. The output
/// track starts from the context terminal latent and consumes the context
/// noise maps; guidance touches only its predicted noise.
struct TransferSession {
  InversionRecord context_record;
  InversionRecord reference_record;
  Tensor x_context;
  Tensor x_reference;
  Tensor x_out;
  int step_index = 0;
  EnergyConfig cfg;
  TimestepPlan plan;
  std::uint64_t seed = 0;
  SigmaVariant sigma_variant = SigmaVariant::PosteriorSqrt;
  std::vector<StepEnergyLog> energy_log;

  bool finished() const { return step_index >= plan.n_steps(); }
};

TransferSession make_session(InversionRecord context_record, InversionRecord reference_record,
                             const EnergyConfig& cfg, std::uint64_t seed);

/// One step of the guided loop: three-track prediction with taps, optional
/// KV-swap branch, masks + positional encoding + correspondence, energy
/// gradient into the output track's noise, fixed-noise transitions, optional
/// AdaIN of the output latent toward the reference.
void guided_step(TransferSession& session, const DenoiserBackend& backend, const Schedule& s);

struct TransferResult {
  Tensor context_recon;    // decoded
  Tensor reference_recon;  // decoded
  Tensor output;           // decoded
  std::vector<StepEnergyLog> energy_log;
};

/// Full pipeline: encode, invert both inputs, run every guided step, decode
/// all three tracks. Deterministic for fixed seed. A reference with fewer
/// frames than the context is replicated per frame.
TransferResult run_transfer(const Tensor& context_input, const Tensor& reference_input,
                            const Condition& context_prompt, const Condition& reference_prompt,
                            const DenoiserBackend& backend, const Schedule& s,
                            const EnergyConfig& cfg, const TimestepPlan& plan, std::uint64_t seed,
                            SigmaVariant variant = SigmaVariant::PosteriorSqrt);

}  // namespace semantix
