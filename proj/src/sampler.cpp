#include "semantix/sampler.hpp"

#include "semantix/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace semantix {

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, Real omega) {
  require_same_shape(eps_cond, eps_uncond, "cfg_combine");
  Tensor out = eps_cond;
  if (omega != 0.0) out.array() += omega * (eps_cond.array() - eps_uncond.array());
  return out;
}

Tensor adain_latents(const Tensor& x_out, const Tensor& x_ref, Real eps_std) {
  if (x_out.channels() != x_ref.channels())
    throw std::invalid_argument("adain_latents: channel count mismatch");
  Tensor y = x_out;
  const Real n_out = Real(x_out.batch()) * x_out.plane_size();
  const Real n_ref = Real(x_ref.batch()) * x_ref.plane_size();

  for (int c = 0; c < x_out.channels(); ++c) {
    Real mu_out = 0.0, mu_ref = 0.0, sq_out = 0.0, sq_ref = 0.0;
    for (int b = 0; b < x_out.batch(); ++b) {
      mu_out += x_out.plane(b, c).sum();
      sq_out += x_out.plane(b, c).square().sum();
    }
    for (int b = 0; b < x_ref.batch(); ++b) {
      mu_ref += x_ref.plane(b, c).sum();
      sq_ref += x_ref.plane(b, c).square().sum();
    }
    mu_out /= n_out;
    mu_ref /= n_ref;
    Real sd_out = std::sqrt(std::max(sq_out / n_out - mu_out * mu_out, 0.0));
    Real sd_ref = std::sqrt(std::max(sq_ref / n_ref - mu_ref * mu_ref, 0.0));
    // eps_std floors the denominator; above the floor the renormalisation is
    // exact, which keeps the operation idempotent
    for (int b = 0; b < x_out.batch(); ++b)
      y.plane(b, c) =
          (x_out.plane(b, c) - mu_out) / std::max(sd_out, eps_std) * sd_ref + mu_ref;
  }
  return y;
}

TransferSession make_session(InversionRecord context_record, InversionRecord reference_record,
                             const EnergyConfig& cfg, std::uint64_t seed) {
  if (context_record.plan.steps != reference_record.plan.steps)
    throw std::invalid_argument("make_session: context and reference plans differ");
  cfg.validate(context_record.plan.n_steps());

  TransferSession s;
  s.plan = context_record.plan;
  s.cfg = cfg;
  s.seed = seed;
  s.sigma_variant = context_record.sigma_variant;
  s.x_context = context_record.x_start;
  s.x_reference = reference_record.x_start;
  s.x_out = context_record.x_start;  // output track boots from the context latent
  s.context_record = std::move(context_record);
  s.reference_record = std::move(reference_record);
  return s;
}

namespace {

/// Deepest tapped decoder self-attention layer: the configured swap layer
/// with the largest downsample (coarsest grid); used for the k-means masks.
int cluster_layer_id(const DenoiserBackend& backend, const EnergyConfig& cfg) {
  int best = -1, best_down = -1;
  const auto layers = cfg.swap_layers.empty() ? std::vector<int>{} : cfg.swap_layers;
  for (int id : layers) {
    int down = backend.attn_layer(id).downsample;
    if (down > best_down) {
      best_down = down;
      best = id;
    }
  }
  if (best >= 0) return best;
  // fall back to the deepest layer the backend offers
  for (const auto& info : backend.attn_layers())
    if (info.downsample > best_down) {
      best_down = info.downsample;
      best = info.id;
    }
  return best;
}

void step_track(Tensor& x, const Tensor& eps_hat, int t, int t_prev, const Schedule& s,
                SigmaVariant variant, const std::map<int, Tensor>& noise_maps) {
  Tensor mu = compute_mu_hat(x, eps_hat, t, t_prev, s, variant);
  Real sig = sigma_between(s, t, t_prev, variant);
  if (sig > 0.0) {
    auto it = noise_maps.find(t);
    if (it == noise_maps.end())
      throw std::invalid_argument("guided_step: missing noise map for t=" + std::to_string(t));
    mu.array() += sig * it->second.array();
  }
  x = std::move(mu);
}

}  // namespace

void guided_step(TransferSession& session, const DenoiserBackend& backend, const Schedule& s) {
  if (session.finished()) throw std::invalid_argument("guided_step: session already finished");
  const EnergyConfig& cfg = session.cfg;
  const int n = session.plan.n_steps();
  const int plan_index = n - 1 - session.step_index;  // consume the plan top-down
  const int t = session.plan.steps[static_cast<size_t>(plan_index)];
  const int t_prev = session.plan.prev_of(plan_index);

  const bool guide = cfg.gamma_ref > 0.0 || cfg.gamma_c > 0.0 || cfg.gamma_reg > 0.0;
  const bool swap_active = session.step_index >= cfg.swap_start_step && !cfg.swap_layers.empty();
  const bool reg_active = swap_active && cfg.gamma_reg > 0.0;
  const bool features_active = guide && !cfg.feature_blocks.empty() &&
                               (cfg.gamma_ref > 0.0 || cfg.gamma_c > 0.0);

  const Condition& cond_c = session.context_record.condition;
  const Condition& cond_r = session.reference_record.condition;

  TapRequest track_taps;
  if (features_active) track_taps.feature_blocks = cfg.feature_blocks;
  const int cluster_layer = features_active ? cluster_layer_id(backend, cfg) : -1;
  if (features_active && cluster_layer >= 0) track_taps.self_attn_layers = {cluster_layer};

  TapRequest context_taps = track_taps;
  if (reg_active)
    for (int id : cfg.swap_layers) context_taps.cross_attn_layers.push_back(id);

  // (1) three-track prediction; context also taps the cross-attention the
  // regularizer compares against
  DenoiserOutput out_c = backend.predict(session.x_context, t, cond_c, context_taps);
  DenoiserOutput out_r = backend.predict(session.x_reference, t, cond_r, track_taps);
  DenoiserOutput out_o = backend.predict(session.x_out, t, cond_c, track_taps);

  Tensor eps_c = cfg_combine(out_c.eps_cond, out_c.eps_uncond, cfg.omega);
  Tensor eps_r = cfg_combine(out_r.eps_cond, out_r.eps_uncond, cfg.omega);
  Tensor eps_o = cfg_combine(out_o.eps_cond, out_o.eps_uncond, cfg.omega);

  StepEnergyLog log;
  log.step = session.step_index;
  log.t = t;

  if (guide) {
    EnergyEvalContext ectx;
    ectx.backend = &backend;
    ectx.condition = cond_c;
    ectx.t = t;
    ectx.cfg = cfg;

    // (2) swap branch: reference K/V into the output branch, keep only the
    // cross-attention maps ("feed x_out into the U-net again")
    KVInjection injection;
    std::map<int, BatchHeadMats> ca_swap;
    if (swap_active) {
      injection = backend.capture_kv(session.x_reference, t, cond_r, cfg.swap_layers);
      if (reg_active) {
        TapRequest swap_taps;
        swap_taps.cross_attn_layers = cfg.swap_layers;
        DenoiserOutput swap_out =
            backend.predict(session.x_out, t, cond_c, swap_taps, &injection);
        ca_swap = std::move(swap_out.cross_attn);
        for (int id : cfg.swap_layers) ectx.ca_context[id] = out_c.cross_attn.at(id);
        ectx.injection = &injection;
      }
    }

    // (3) masks, positional encoding, correspondence, rearranged features
    if (features_active) {
      const int B = session.x_out.batch();

      // cluster once per frame on the deepest tapped self-attention, then
      // resample the masks to each block's grid; context and reference keep
      // their own grid dims
      std::vector<GridMask> mask_c(static_cast<size_t>(B)), mask_r(static_cast<size_t>(B));
      bool have_cluster = cluster_layer >= 0;
      if (have_cluster) {
        const auto& info = backend.attn_layer(cluster_layer);
        for (int b = 0; b < B; ++b) {
          mask_c[static_cast<size_t>(b)] = cluster_masks(
              out_c.self_attn.at(cluster_layer)[static_cast<size_t>(b)],
              session.x_context.height() / info.downsample,
              session.x_context.width() / info.downsample, cfg.k_clusters,
              mix_seed(session.seed, 0xc1u, std::uint64_t(t)));
          mask_r[static_cast<size_t>(b)] = cluster_masks(
              out_r.self_attn.at(cluster_layer)[static_cast<size_t>(b)],
              session.x_reference.height() / info.downsample,
              session.x_reference.width() / info.downsample, cfg.k_clusters,
              mix_seed(session.seed, 0xc2u, std::uint64_t(t)));
        }
      }

      for (int block : cfg.feature_blocks) {
        const Tensor& fc_raw = out_c.features.at(block);
        const Tensor& fr_raw = out_r.features.at(block);
        PositionalField pe_c =
            make_positional_field(fc_raw.channels(), fc_raw.height(), fc_raw.width(), cfg.pe_mode,
                                  B, cfg.lambda_pe);
        PositionalField pe_r =
            make_positional_field(fr_raw.channels(), fr_raw.height(), fr_raw.width(), cfg.pe_mode,
                                  B, cfg.lambda_pe);
        FeatureMap fc{fc_raw, block, t};
        FeatureMap fr{fr_raw, block, t};
        FeatureMap fc_enc = add_positional_encoding(fc, pe_c);
        FeatureMap fr_enc = add_positional_encoding(fr, pe_r);

        Tensor ref_star(B, fc_raw.channels(), fc_raw.height(), fc_raw.width());
        std::vector<GridMask> block_masks;
        for (int b = 0; b < B; ++b) {
          RegionMask masks{GridMask::full(fc_raw.height(), fc_raw.width()),
                           GridMask::full(fr_raw.height(), fr_raw.width())};
          if (have_cluster) {
            masks.context_mask =
                resample_mask(mask_c[static_cast<size_t>(b)], fc_raw.height(), fc_raw.width());
            masks.reference_mask =
                resample_mask(mask_r[static_cast<size_t>(b)], fr_raw.height(), fr_raw.width());
          }
          CorrespondenceMap corr = match_features(fc_enc, fr_enc, masks, b);
          if (cfg.shuffle_correspondence)
            corr = shuffle_assignment(corr, fc_enc, fr_enc,
                                      mix_seed(cfg.shuffle_seed, std::uint64_t(t),
                                               std::uint64_t(block), std::uint64_t(b)),
                                      b);
          FeatureMap star = rearrange(fr, corr, b);
          for (int ch = 0; ch < ref_star.channels(); ++ch)
            ref_star.plane(b, ch) = star.data.plane(0, ch);
          block_masks.push_back(std::move(masks.context_mask));
        }
        ectx.f_ref_star.emplace(block, FeatureMap{std::move(ref_star), block, t});
        ectx.f_context.emplace(block, fc);
        ectx.context_masks.emplace(block, std::move(block_masks));
      }
    }

    // (4) guided noise for the output track only
    EnergyGradient eg =
        energy_gradient_with_outputs(session.x_out, ectx, out_o.features, ca_swap, true);
    eps_o.array() += eg.grad.array();
    log.breakdown = eg.breakdown;
    log.grad_max_abs = eg.grad_max_abs;
  }

  // (5) fixed-noise transitions: own noise for context/reference, context
  // noise for the output track
  step_track(session.x_context, eps_c, t, t_prev, s, session.sigma_variant,
             session.context_record.noise_maps);
  step_track(session.x_reference, eps_r, t, t_prev, s, session.sigma_variant,
             session.reference_record.noise_maps);
  step_track(session.x_out, eps_o, t, t_prev, s, session.sigma_variant,
             session.context_record.noise_maps);

  if (!all_finite(session.x_out) || !all_finite(session.x_context) ||
      !all_finite(session.x_reference))
    throw std::runtime_error("guided_step: non-finite latent at step " +
                             std::to_string(session.step_index) + " (t=" + std::to_string(t) +
                             ")");

  // (6) colour harmonisation of the output latent
  if (session.step_index >= cfg.adain_start_step)
    session.x_out = adain_latents(session.x_out, session.x_reference);

  session.energy_log.push_back(log);
  session.step_index += 1;
}

TransferResult run_transfer(const Tensor& context_input, const Tensor& reference_input,
                            const Condition& context_prompt, const Condition& reference_prompt,
                            const DenoiserBackend& backend, const Schedule& s,
                            const EnergyConfig& cfg, const TimestepPlan& plan, std::uint64_t seed,
                            SigmaVariant variant) {
  Tensor x0_context = backend.encode(context_input);
  Tensor reference = reference_input;
  if (reference.batch() != context_input.batch()) {
    if (reference.batch() != 1)
      throw std::invalid_argument("run_transfer: reference must have 1 frame or match context");
    Tensor tiled(context_input.batch(), reference.channels(), reference.height(),
                 reference.width());
    for (int b = 0; b < tiled.batch(); ++b)
      for (int c = 0; c < tiled.channels(); ++c) tiled.plane(b, c) = reference.plane(0, c);
    reference = std::move(tiled);
  }
  Tensor x0_reference = backend.encode(reference);

  InversionRecord rc = invert(x0_context, backend, context_prompt, s, plan, cfg.omega,
                              mix_seed(seed, 0x10), variant);
  InversionRecord rr = invert(x0_reference, backend, reference_prompt, s, plan, cfg.omega,
                              mix_seed(seed, 0x20), variant);

  TransferSession session = make_session(std::move(rc), std::move(rr), cfg, seed);
  while (!session.finished()) guided_step(session, backend, s);

  TransferResult res;
  res.context_recon = backend.decode(session.x_context);
  res.reference_recon = backend.decode(session.x_reference);
  res.output = backend.decode(session.x_out);
  res.energy_log = std::move(session.energy_log);
  return res;
}

}  // namespace semantix
