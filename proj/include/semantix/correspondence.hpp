#pragma once

#include "semantix/denoiser.hpp"
#include "semantix/tensor.hpp"

#include <cstdint>

namespace semantix {

/// Decoder features tapped at one block, [B, c', h', w'].
struct FeatureMap {
  Tensor data;
  int block_id = 0;
  int timestep = 0;
};

enum class PeMode { TwoD, ThreeD };

PeMode pe_mode_from_string(const std::string& name);
std::string to_string(PeMode mode);

/// Fixed sinusoidal positional field. 2d: half the channels encode the row
/// index, half the column, frequencies geometric from 1 down to 1e-4. 3d
/// splits channels three ways and adds a frame axis. Deterministic in the
/// dimensions alone.
struct PositionalField {
  Tensor data;  // [frames(1 for 2d), c', h', w']
  PeMode mode = PeMode::TwoD;
  Real weight = 0.0;  // lambda_pe
};

PositionalField make_positional_field(int channels, int h, int w, PeMode mode, int frames = 1,
                                      Real weight = 0.0);

/// F + lambda_pe * pe, broadcast over the batch axis (2d) or aligned per
/// frame (3d). The input map is untouched.
FeatureMap add_positional_encoding(const FeatureMap& f, const PositionalField& pe);

/// Boolean foreground grid produced by clustering; `degenerate` flags the
/// all-identical-input fallback (full mask).
struct GridMask {
  Eigen::Array<bool, Eigen::Dynamic, 1> mask;  // size h*w, row-major
  int h = 0, w = 0;
  bool degenerate = false;

  static GridMask full(int h, int w);
  Eigen::Index count() const { return mask.count(); }
};

/// Context/reference mask pair restricting matching and style guidance.
struct RegionMask {
  GridMask context_mask;
  GridMask reference_mask;

  static RegionMask full(int h, int w) { return {GridMask::full(h, w), GridMask::full(h, w)}; }
};

/// Per-position nearest-neighbour assignment from context into reference
/// features; invalid rows are positions outside the context mask.
struct CorrespondenceMap {
  Eigen::ArrayXi assignment;                    // size n_context, reference linear index
  Array distances;                              // minimal squared L2 per valid position
  Eigen::Array<bool, Eigen::Dynamic, 1> valid;  // inside-context-mask flag
  int h = 0, w = 0;
};

/// argmin_j ||v_i^c - v_j^ref||^2 over reference positions inside the
/// reference mask, for every context position inside the context mask. Ties
/// break to the smallest linear index. `frame` selects the batch entry on
/// both sides.
CorrespondenceMap match_features(const FeatureMap& f_context, const FeatureMap& f_reference,
                                 const RegionMask& masks, int frame = 0);

/// Output position i holds the reference vector at assignment[i]; invalid
/// positions are zero-filled. Single-frame result.
FeatureMap rearrange(const FeatureMap& f_reference, const CorrespondenceMap& m, int frame = 0);

/// Seeded k-means over per-position self-attention profiles (rows of the
/// head-averaged map); the cluster receiving the most attention (largest mean
/// column sum) becomes the foreground. Fixed cap of 100 iterations,
/// tolerance 1e-6.
GridMask cluster_masks(const HeadMats& self_attn, int h, int w, int k, std::uint64_t seed);

/// Nearest-neighbour resampling of a boolean grid onto another grid (masks
/// come from the attention resolution, features live on the block
/// resolution). Falls back to the full mask if resampling empties it.
GridMask resample_mask(const GridMask& m, int h, int w);

/// Top-3 principal components of the per-position feature vectors, each
/// min-max normalised to [0,1] as an RGB plane. Missing components (rank < 3)
/// come out zero.
Tensor pca_visualize(const FeatureMap& f, int frame = 0);

/// Seeded permutation of the valid assignments (the robustness knob).
/// Distances are recomputed against the shuffled targets, which is why the
/// encoded feature maps used for matching are required here.
CorrespondenceMap shuffle_assignment(const CorrespondenceMap& m, const FeatureMap& f_context,
                                     const FeatureMap& f_reference, std::uint64_t seed,
                                     int frame = 0);

}  // namespace semantix
