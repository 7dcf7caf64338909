#pragma once

#include "semantix/denoiser.hpp"

#include <cstdint>

namespace semantix {

/// Deterministic desk-scale backend. Everything is a fixed seeded map:
///   eps(x, t, c)   = per-channel circular 3x3 convolution of x (kernel keyed
///                    by (t, channel)) plus a bias field keyed by (prompt, t);
///   features       = linear projections of wrap-around 4x4 latent patches,
///                    so identical patches produce identical feature vectors
///                    and nearest-neighbour correspondence has ground truth;
///   self-attention = softmax(Q K^T / sqrt(d)) over per-position patch
///                    projections;
///   cross-attention queries come from the self-attention output of the same
///   layer, keys from a seeded prompt embedding, which is what makes a KV
///   swap visible in the cross-attention maps.
/// All outputs are differentiable in x; vjp() is the exact analytic pullback.
struct ToyDenoiserOptions {
  std::uint64_t seed = 0;
  int in_channels = 3;
  int patch = 4;
  int latent_downscale = 1;
  std::vector<FeatureBlockInfo> blocks;  // empty -> default table
  std::vector<AttnLayerInfo> layers;     // empty -> default table

  static std::vector<FeatureBlockInfo> default_blocks();
  static std::vector<AttnLayerInfo> default_layers();
};

class ToyDenoiser final : public DenoiserBackend {
 public:
  explicit ToyDenoiser(ToyDenoiserOptions options);

  DenoiserOutput predict(const Tensor& x, int t, const Condition& c, const TapRequest& taps = {},
                         const KVInjection* injection = nullptr) const override;
  KVInjection capture_kv(const Tensor& x, int t, const Condition& c,
                         const std::vector<int>& layer_ids) const override;
  Tensor vjp(const Tensor& x, int t, const Condition& c, const TapCotangents& cot,
             const KVInjection* injection = nullptr) const override;
  bool differentiable() const override { return true; }

  std::vector<FeatureBlockInfo> feature_blocks() const override { return options_.blocks; }
  std::vector<AttnLayerInfo> attn_layers() const override { return options_.layers; }

  Tensor encode(const Tensor& image) const override;
  Tensor decode(const Tensor& latent) const override;

  const ToyDenoiserOptions& options() const { return options_; }

  /// Patch-projection matrix of one feature block (channels x C*patch^2);
  /// exposed for shape/oracle tests.
  const Matrix& block_projection(int block_id) const;

 private:
  struct LayerWeights {
    // per head: patch -> Q/K/V maps (m x d), self-out -> cross-query map
    // (d x d), prompt-independent
    std::vector<Matrix> wq, wk, wv, wcross;
  };
  struct LayerState {  // forward intermediates of one layer, one batch entry
    Matrix phi;        // n x m patch matrix
    HeadMats q, k, v;  // n x d
    HeadMats attn;     // n x n softmax rows
    HeadMats out;      // n x d
    HeadMats cross_q;  // n x d
    HeadMats cross;    // n x tokens softmax rows
    bool injected = false;
  };

  Matrix patch_matrix(const Tensor& x, int b, int downsample) const;
  void scatter_patch_grad(Tensor& grad, int b, int downsample, const Matrix& phi_bar) const;
  Matrix prompt_embedding(const Condition& c, int layer_id, int head) const;
  LayerState layer_forward(const Tensor& x, int b, const AttnLayerInfo& info,
                           const Condition& c, const KVInjection* injection) const;
  void add_eps(const Tensor& x, int t, const Condition& c, Tensor& out) const;
  void eps_vjp(const Tensor& cotangent, int t, Tensor& grad) const;

  ToyDenoiserOptions options_;
  std::map<int, Matrix> block_proj_;        // block id -> (channels x m)
  std::map<int, LayerWeights> layer_weights_;
};

/// register_backend("toy", ...) is done once at static-init time; this forces
/// the registration when linking the library statically.
void ensure_toy_backend_registered();

}  // namespace semantix
