#pragma once

#include "semantix/correspondence.hpp"
#include "semantix/denoiser.hpp"

#include <map>
#include <vector>

namespace semantix {

/// All guidance weights and schedule thresholds. Defaults are the image
/// preset; video() switches the gamma triple.
struct EnergyConfig {
  Real gamma_ref = 3.0;
  Real gamma_c = 0.9;
  Real gamma_reg = 1.0;
  Real lambda_pe = 3.0;
  Real omega = 3.5;
  Real clamp_lo = -1.0;
  Real clamp_hi = 1.0;
  int swap_start_step = 10;
  int adain_start_step = 20;
  std::vector<int> feature_blocks = {2, 3};
  std::vector<int> swap_layers = {3, 4};
  PeMode pe_mode = PeMode::TwoD;
  int k_clusters = 2;
  bool shuffle_correspondence = false;
  std::uint64_t shuffle_seed = 0;

  static EnergyConfig image() { return {}; }
  static EnergyConfig video() {
    EnergyConfig c;
    c.gamma_ref = 6.0;
    c.gamma_c = 3.0;
    c.gamma_reg = 5.0;
    return c;
  }

  void validate(int plan_steps) const;
};

struct EnergyBreakdown {
  Real style = 0.0;
  Real spatial = 0.0;
  Real regularizer = 0.0;
  Real total = 0.0;
};

/// Mean over masked positions of 1 - cos(v_out, v_target), averaged over
/// frames; range [0,2]. Zero-norm vectors contribute 1 (orthogonality
/// convention) and bump *zero_norm_count when supplied.
Real style_term(const FeatureMap& f_out, const FeatureMap& f_ref_star, const GridMask& mask,
                long* zero_norm_count = nullptr);

/// Unmasked mean of 1 - cos(v_out, v_context) over all positions and frames.
Real spatial_term(const FeatureMap& f_out, const FeatureMap& f_context,
                  long* zero_norm_count = nullptr);

/// Sum over layers of the mean squared difference between the swapped and
/// the context cross-attention maps. The context side is a constant
/// (stop-gradient).
Real semantic_distance(const std::map<int, BatchHeadMats>& ca_swap,
                       const std::map<int, BatchHeadMats>& ca_context);

EnergyBreakdown total_energy(Real style, Real spatial, Real regularizer, const EnergyConfig& cfg);

/// Everything energy_gradient needs besides the latent itself. Correspondence
/// targets and masks are held fixed: no gradient flows through argmin
/// matching, k-means, or the context/reference branches.
struct EnergyEvalContext {
  const DenoiserBackend* backend = nullptr;
  Condition condition;
  int t = 0;
  EnergyConfig cfg;
  // per feature block: rearranged style target and raw context features
  std::map<int, FeatureMap> f_ref_star;
  std::map<int, FeatureMap> f_context;
  // per feature block: context mask per frame (a single entry broadcasts)
  std::map<int, std::vector<GridMask>> context_masks;
  // regularizer constants + the reference KV to inject for the swap branch;
  // regularizer inactive when ca_context is empty
  std::map<int, BatchHeadMats> ca_context;
  const KVInjection* injection = nullptr;
};

struct EnergyGradient {
  Tensor grad;  // clamped unless clamp disabled
  EnergyBreakdown breakdown;
  Real grad_max_abs = 0.0;
  long zero_norm_count = 0;
};

/// Gradient of the total energy with respect to x_out_t, elementwise clamped
/// to [clamp_lo, clamp_hi] (pass apply_clamp = false for the raw gradient).
/// Runs its own forward passes; prefer energy_gradient_with_outputs inside
/// the sampling loop where pass-1 taps already exist.
EnergyGradient energy_gradient(const Tensor& x_out_t, const EnergyEvalContext& ctx,
                               bool apply_clamp = true);

/// Same, reusing a precomputed plain forward pass (features of x_out_t) and
/// swap-branch cross-attention maps.
EnergyGradient energy_gradient_with_outputs(const Tensor& x_out_t, const EnergyEvalContext& ctx,
                                            const std::map<int, Tensor>& features_out,
                                            const std::map<int, BatchHeadMats>& ca_swap,
                                            bool apply_clamp = true);

/// Scalar energy at x (fresh forward passes, no gradient); the
/// finite-difference oracle in the tests differentiates this.
EnergyBreakdown energy_value(const Tensor& x, const EnergyEvalContext& ctx);

}  // namespace semantix
