#pragma once

#include "semantix/tensor.hpp"

#include <cstdint>
#include <string>

namespace semantix {

/// Model-free Gram feature descriptor: raw channels plus seeded 4x4 patch
/// projections. A perceptual backbone can slot in behind the same levels
/// via the plugin hook in gram_loss.
struct GramFeatureSpec {
  bool raw_channels = true;
  bool patch_projections = true;
  int patch = 4;
  int patch_dims = 12;
  std::uint64_t seed = 7;
};

/// Mean over feature levels of the mean squared difference between Gram
/// matrices G = F^T F / n. Position-blind by construction.
Real gram_loss(const Tensor& a, const Tensor& b, const GramFeatureSpec& spec = {});

/// Standard SSIM: 11x11 Gaussian window, sigma 1.5, C1 = 0.01^2,
/// C2 = 0.03^2, valid-window mean, averaged over channels. Inputs in [0,1].
Real ssim(const Tensor& a, const Tensor& b);

struct MetricReport {
  Real gram_loss = 0.0;
  Real ssim = 0.0;
  Real recon_max_abs = 0.0;
  std::string notes;
};

MetricReport compare_images(const Tensor& a, const Tensor& b);

}  // namespace semantix
