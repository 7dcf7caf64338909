#include "semantix/energy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace semantix {

namespace {

constexpr Real kNormFloor = 1e-30;

struct CosineAccum {
  Real sum = 0.0;
  long count = 0;
  long zero_norms = 0;
};

/// Accumulates 1 - cos(out_i, target_i) over selected rows; when out_bar is
/// given, also adds cot_scale * d(1 - cos)/d(out_i) into it.
void cosine_distance_rows(const Matrix& out, const Matrix& target,
                          const Eigen::Array<bool, Eigen::Dynamic, 1>* select, CosineAccum& acc,
                          Matrix* out_bar, Real cot_scale) {
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (select != nullptr && !(*select)[i]) continue;
    acc.count += 1;
    Real nu = out.row(i).norm();
    Real nw = target.row(i).norm();
    if (nu < kNormFloor || nw < kNormFloor) {
      acc.sum += 1.0;  // orthogonality convention for zero-norm vectors
      acc.zero_norms += 1;
      continue;
    }
    Real dot = out.row(i).dot(target.row(i));
    acc.sum += 1.0 - dot / (nu * nw);
    if (out_bar != nullptr && cot_scale != 0.0) {
      out_bar->row(i) +=
          cot_scale * (dot / (nu * nu * nu * nw) * out.row(i) - target.row(i) / (nu * nw));
    }
  }
}

void check_same_grid(const FeatureMap& a, const FeatureMap& b, const char* what) {
  if (a.data.channels() != b.data.channels() || a.data.height() != b.data.height() ||
      a.data.width() != b.data.width())
    throw std::invalid_argument(std::string(what) + ": feature map dims mismatch");
}

}  // namespace

void EnergyConfig::validate(int plan_steps) const {
  if (!(clamp_lo < clamp_hi)) throw std::invalid_argument("EnergyConfig: clamp lo must be < hi");
  if (gamma_ref < 0 || gamma_c < 0 || gamma_reg < 0 || lambda_pe < 0)
    throw std::invalid_argument("EnergyConfig: weights must be nonnegative");
  if (swap_start_step < 0 || adain_start_step < 0)
    throw std::invalid_argument("EnergyConfig: start steps must be nonnegative");
  if (plan_steps > 0 && (swap_start_step > plan_steps || adain_start_step > plan_steps))
    throw std::invalid_argument("EnergyConfig: start step beyond plan length " +
                                std::to_string(plan_steps));
  if (k_clusters < 1) throw std::invalid_argument("EnergyConfig: k-clusters must be >= 1");
}

Real style_term(const FeatureMap& f_out, const FeatureMap& f_ref_star, const GridMask& mask,
                long* zero_norm_count) {
  check_same_grid(f_out, f_ref_star, "style_term");
  if (mask.mask.size() != f_out.data.plane_size())
    throw std::invalid_argument("style_term: mask size mismatch");

  CosineAccum acc;
  for (int b = 0; b < f_out.data.batch(); ++b) {
    Matrix u = position_view(f_out.data, b);
    Matrix w = position_view(f_ref_star.data, std::min(b, f_ref_star.data.batch() - 1));
    cosine_distance_rows(u, w, &mask.mask, acc, nullptr, 0.0);
  }
  if (zero_norm_count != nullptr) *zero_norm_count += acc.zero_norms;
  return acc.count == 0 ? 0.0 : acc.sum / Real(acc.count);
}

Real spatial_term(const FeatureMap& f_out, const FeatureMap& f_context, long* zero_norm_count) {
  check_same_grid(f_out, f_context, "spatial_term");
  CosineAccum acc;
  for (int b = 0; b < f_out.data.batch(); ++b) {
    Matrix u = position_view(f_out.data, b);
    Matrix w = position_view(f_context.data, std::min(b, f_context.data.batch() - 1));
    cosine_distance_rows(u, w, nullptr, acc, nullptr, 0.0);
  }
  if (zero_norm_count != nullptr) *zero_norm_count += acc.zero_norms;
  return acc.count == 0 ? 0.0 : acc.sum / Real(acc.count);
}

Real semantic_distance(const std::map<int, BatchHeadMats>& ca_swap,
                       const std::map<int, BatchHeadMats>& ca_context) {
  Real total = 0.0;
  for (const auto& [layer, swap_b] : ca_swap) {
    auto it = ca_context.find(layer);
    if (it == ca_context.end())
      throw std::invalid_argument("semantic_distance: missing context maps for layer " +
                                  std::to_string(layer));
    const BatchHeadMats& ctx_b = it->second;
    if (ctx_b.size() != swap_b.size())
      throw std::invalid_argument("semantic_distance: batch mismatch at layer " +
                                  std::to_string(layer));
    Real sum = 0.0;
    long n = 0;
    for (size_t b = 0; b < swap_b.size(); ++b) {
      if (ctx_b[b].size() != swap_b[b].size())
        throw std::invalid_argument("semantic_distance: head count mismatch");
      for (size_t h = 0; h < swap_b[b].size(); ++h) {
        const Matrix& a = swap_b[b][h];
        const Matrix& c = ctx_b[b][h];
        if (a.rows() != c.rows() || a.cols() != c.cols())
          throw std::invalid_argument("semantic_distance: attention shape mismatch at layer " +
                                      std::to_string(layer));
        sum += (a - c).squaredNorm();
        n += a.size();
      }
    }
    if (n > 0) total += sum / Real(n);
  }
  return total;
}

EnergyBreakdown total_energy(Real style, Real spatial, Real regularizer,
                             const EnergyConfig& cfg) {
  EnergyBreakdown b;
  b.style = style;
  b.spatial = spatial;
  b.regularizer = regularizer;
  b.total = cfg.gamma_ref * style + cfg.gamma_c * spatial + cfg.gamma_reg * regularizer;
  return b;
}

namespace {

const GridMask& mask_for_frame(const std::vector<GridMask>& masks, int b) {
  return masks[std::min<size_t>(static_cast<size_t>(b), masks.size() - 1)];
}

EnergyGradient evaluate_energy(const Tensor& x_out_t, const EnergyEvalContext& ctx,
                               const std::map<int, Tensor>& features_out,
                               const std::map<int, BatchHeadMats>& ca_swap, bool compute_grad,
                               bool apply_clamp) {
  if (ctx.backend == nullptr) throw std::invalid_argument("energy_gradient: null backend");
  const EnergyConfig& cfg = ctx.cfg;

  EnergyGradient res;
  res.grad = Tensor(x_out_t.batch(), x_out_t.channels(), x_out_t.height(), x_out_t.width());

  const int n_blocks = static_cast<int>(cfg.feature_blocks.size());
  const bool have_features = !features_out.empty() && n_blocks > 0 && !ctx.f_ref_star.empty();
  const bool have_reg = !ca_swap.empty() && !ctx.ca_context.empty();
  const bool grad_features =
      compute_grad && have_features && (cfg.gamma_ref > 0.0 || cfg.gamma_c > 0.0);
  const bool grad_reg = compute_grad && have_reg && cfg.gamma_reg > 0.0;

  Real style_sum = 0.0, spatial_sum = 0.0;
  TapCotangents cot;

  if (have_features) {
    for (int block : cfg.feature_blocks) {
      const Tensor& f_out = features_out.at(block);
      const FeatureMap& ref_star = ctx.f_ref_star.at(block);
      const FeatureMap& f_ctx = ctx.f_context.at(block);
      auto masks_it = ctx.context_masks.find(block);
      if (masks_it == ctx.context_masks.end() || masks_it->second.empty())
        throw std::invalid_argument("energy_gradient: no context mask for block " +
                                    std::to_string(block));
      const int B = f_out.batch();
      long style_n = 0;
      for (int b = 0; b < B; ++b) {
        const GridMask& m = mask_for_frame(masks_it->second, b);
        if (m.mask.size() != f_out.plane_size())
          throw std::invalid_argument("energy_gradient: mask size does not match block " +
                                      std::to_string(block));
        style_n += m.count();
      }
      style_n = std::max<long>(style_n, 1);
      const long spatial_n = static_cast<long>(B) * f_out.plane_size();

      Tensor fbar(f_out.batch(), f_out.channels(), f_out.height(), f_out.width());
      CosineAccum style_acc, spatial_acc;
      for (int b = 0; b < B; ++b) {
        Matrix u = position_view(f_out, b);
        Matrix bar = Matrix::Zero(u.rows(), u.cols());
        Matrix w_style = position_view(ref_star.data, std::min(b, ref_star.data.batch() - 1));
        Matrix w_ctx = position_view(f_ctx.data, std::min(b, f_ctx.data.batch() - 1));

        cosine_distance_rows(u, w_style, &mask_for_frame(masks_it->second, b).mask, style_acc,
                             grad_features ? &bar : nullptr,
                             cfg.gamma_ref / (Real(n_blocks) * Real(style_n)));
        cosine_distance_rows(u, w_ctx, nullptr, spatial_acc, grad_features ? &bar : nullptr,
                             cfg.gamma_c / (Real(n_blocks) * Real(spatial_n)));
        if (grad_features) position_view(fbar, b) = bar;
      }
      style_sum += style_acc.count == 0 ? 0.0 : style_acc.sum / Real(style_acc.count);
      spatial_sum += spatial_acc.count == 0 ? 0.0 : spatial_acc.sum / Real(spatial_acc.count);
      res.zero_norm_count += style_acc.zero_norms + spatial_acc.zero_norms;
      if (grad_features) cot.features.emplace(block, std::move(fbar));
    }
    style_sum /= Real(n_blocks);
    spatial_sum /= Real(n_blocks);
  }

  Real reg = have_reg ? semantic_distance(ca_swap, ctx.ca_context) : 0.0;
  res.breakdown = total_energy(style_sum, spatial_sum, reg, cfg);

  if (grad_features) {
    Tensor g = ctx.backend->vjp(x_out_t, ctx.t, ctx.condition, cot, nullptr);
    res.grad.array() += g.array();
  }
  if (grad_reg) {
    TapCotangents reg_cot;
    for (const auto& [layer, swap_b] : ca_swap) {
      const BatchHeadMats& ctx_b = ctx.ca_context.at(layer);
      long n = 0;
      for (const auto& heads : swap_b)
        for (const auto& m : heads) n += m.size();
      if (n == 0) continue;
      BatchHeadMats bars;
      for (size_t b = 0; b < swap_b.size(); ++b) {
        HeadMats hb;
        for (size_t h = 0; h < swap_b[b].size(); ++h)
          hb.push_back(cfg.gamma_reg * 2.0 / Real(n) * (swap_b[b][h] - ctx_b[b][h]));
        bars.push_back(std::move(hb));
      }
      reg_cot.cross_attn.emplace(layer, std::move(bars));
    }
    Tensor g = ctx.backend->vjp(x_out_t, ctx.t, ctx.condition, reg_cot, ctx.injection);
    res.grad.array() += g.array();
  }

  if (apply_clamp) res.grad.array() = res.grad.array().min(cfg.clamp_hi).max(cfg.clamp_lo);
  res.grad_max_abs = max_abs(res.grad);
  return res;
}

/// Forward passes feeding the energy: plain features of x plus swap-branch
/// cross-attention maps.
void energy_forward(const Tensor& x, const EnergyEvalContext& ctx,
                    std::map<int, Tensor>& features, std::map<int, BatchHeadMats>& ca_swap) {
  TapRequest taps;
  if (!ctx.f_ref_star.empty()) taps.feature_blocks = ctx.cfg.feature_blocks;
  if (taps.any()) {
    DenoiserOutput out = ctx.backend->predict(x, ctx.t, ctx.condition, taps, nullptr);
    features = std::move(out.features);
  }
  if (!ctx.ca_context.empty()) {
    TapRequest swap_taps;
    for (const auto& [layer, unused] : ctx.ca_context) swap_taps.cross_attn_layers.push_back(layer);
    DenoiserOutput swap_out =
        ctx.backend->predict(x, ctx.t, ctx.condition, swap_taps, ctx.injection);
    ca_swap = std::move(swap_out.cross_attn);
  }
}

}  // namespace

EnergyGradient energy_gradient_with_outputs(const Tensor& x_out_t, const EnergyEvalContext& ctx,
                                            const std::map<int, Tensor>& features_out,
                                            const std::map<int, BatchHeadMats>& ca_swap,
                                            bool apply_clamp) {
  return evaluate_energy(x_out_t, ctx, features_out, ca_swap, true, apply_clamp);
}

EnergyGradient energy_gradient(const Tensor& x_out_t, const EnergyEvalContext& ctx,
                               bool apply_clamp) {
  if (ctx.backend == nullptr) throw std::invalid_argument("energy_gradient: null backend");
  if (!ctx.backend->differentiable())
    throw std::invalid_argument("energy_gradient: backend is not differentiable");
  std::map<int, Tensor> features;
  std::map<int, BatchHeadMats> ca_swap;
  energy_forward(x_out_t, ctx, features, ca_swap);
  return evaluate_energy(x_out_t, ctx, features, ca_swap, true, apply_clamp);
}

EnergyBreakdown energy_value(const Tensor& x, const EnergyEvalContext& ctx) {
  if (ctx.backend == nullptr) throw std::invalid_argument("energy_value: null backend");
  std::map<int, Tensor> features;
  std::map<int, BatchHeadMats> ca_swap;
  energy_forward(x, ctx, features, ca_swap);
  return evaluate_energy(x, ctx, features, ca_swap, false, false).breakdown;
}

}  // namespace semantix
