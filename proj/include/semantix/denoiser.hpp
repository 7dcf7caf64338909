#pragma once

#include "semantix/tensor.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace semantix {

/// Text condition; the null token marks the unconditional branch.
struct Condition {
  std::string prompt;
  bool is_null = false;

  static Condition null_token() { return {"", true}; }
  static Condition text(std::string p) { return {std::move(p), false}; }
};

/// Which intermediate quantities a predict() call should capture.
struct TapRequest {
  std::vector<int> feature_blocks;
  std::vector<int> self_attn_layers;
  std::vector<int> cross_attn_layers;

  bool any() const {
    return !feature_blocks.empty() || !self_attn_layers.empty() || !cross_attn_layers.empty();
  }
};

/// One matrix per attention head.
using HeadMats = std::vector<Matrix>;
/// One HeadMats per batch/frame entry.
using BatchHeadMats = std::vector<HeadMats>;

struct DenoiserOutput {
  Tensor eps_cond;    // epsilon(x_t; t, prompt)
  Tensor eps_uncond;  // epsilon(x_t; t, null token)
  std::map<int, Tensor> features;            // block id -> [B, c', h', w']
  std::map<int, BatchHeadMats> self_attn;    // layer id -> [B][heads] (n x n), rows sum to 1
  std::map<int, BatchHeadMats> cross_attn;   // layer id -> [B][heads] (n x tokens), rows sum to 1
};

/// Keys/values captured from one branch for injection into another
/// (self-attention layers only).
struct KVInjection {
  std::vector<int> layer_ids;
  std::map<int, BatchHeadMats> keys;    // layer id -> [B][heads] (n x d_head)
  std::map<int, BatchHeadMats> values;  // same shapes as keys
};

/// Cotangents for the reverse pass: d(scalar)/d(tap output). Any entry may be
/// absent; vjp() returns the sum of all supplied pullbacks.
struct TapCotangents {
  std::map<int, Tensor> features;
  std::map<int, BatchHeadMats> self_attn;
  std::map<int, BatchHeadMats> cross_attn;
  std::optional<Tensor> eps_cond;
  std::optional<Tensor> eps_uncond;

  bool any() const {
    return !features.empty() || !self_attn.empty() || !cross_attn.empty() ||
           eps_cond.has_value() || eps_uncond.has_value();
  }
};

struct FeatureBlockInfo {
  int id = 0;
  int channels = 0;
  int downsample = 1;  // latent (h,w) -> feature (h/downsample, w/downsample)
};

struct AttnLayerInfo {
  int id = 0;
  int downsample = 1;
  int heads = 0;
  int d_head = 0;
  int tokens = 0;  // cross-attention key/value count
};

/// Contract every denoiser backend satisfies: noise prediction for both CFG
/// branches, feature/attention taps, KV capture/injection, an encoder pair
/// for image <-> latent, and (for differentiable backends) vector-Jacobian
/// products against the tapped outputs. Backends are immutable after
/// construction; concurrent calls on one backend are safe.
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  virtual DenoiserOutput predict(const Tensor& x, int t, const Condition& c,
                                 const TapRequest& taps = {},
                                 const KVInjection* injection = nullptr) const = 0;

  virtual KVInjection capture_kv(const Tensor& x, int t, const Condition& c,
                                 const std::vector<int>& layer_ids) const = 0;

  /// Gradient of sum_i <cotangent_i, output_i(x)> with respect to x. Energy
  /// guidance requires this; non-differentiable backends throw at
  /// configuration time via differentiable() = false.
  virtual Tensor vjp(const Tensor& x, int t, const Condition& c, const TapCotangents& cot,
                     const KVInjection* injection = nullptr) const = 0;

  virtual bool differentiable() const = 0;

  virtual std::vector<FeatureBlockInfo> feature_blocks() const = 0;
  virtual std::vector<AttnLayerInfo> attn_layers() const = 0;

  FeatureBlockInfo feature_block(int id) const;
  AttnLayerInfo attn_layer(int id) const;

  /// Image [B,3,H,W] in [0,1] -> latent; the toy backend is the identity
  /// (with optional average-pool downscale).
  virtual Tensor encode(const Tensor& image) const = 0;
  virtual Tensor decode(const Tensor& latent) const = 0;
};

/// Adapter plugins register a factory under a name; `denoiser.kind = adapter`
/// plus `denoiser.adapter-name` select it at runtime.
struct BackendOptions {
  std::uint64_t seed = 0;
  int latent_downscale = 1;
  std::map<std::string, std::string> extra;
};

using BackendFactory = std::function<std::unique_ptr<DenoiserBackend>(const BackendOptions&)>;

void register_backend(const std::string& name, BackendFactory factory);
bool backend_registered(const std::string& name);
std::unique_ptr<DenoiserBackend> make_registered_backend(const std::string& name,
                                                         const BackendOptions& options);
std::vector<std::string> registered_backend_names();

}  // namespace semantix
