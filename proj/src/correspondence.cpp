#include "semantix/correspondence.hpp"

#include "semantix/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace semantix {

PeMode pe_mode_from_string(const std::string& name) {
  if (name == "2d") return PeMode::TwoD;
  if (name == "3d") return PeMode::ThreeD;
  throw std::invalid_argument("unknown pe mode '" + name + "' (expected 2d or 3d)");
}

std::string to_string(PeMode mode) { return mode == PeMode::TwoD ? "2d" : "3d"; }

namespace {

/// Sinusoidal encoding of `index` into `channels` values starting at dst.
/// Channel pairs (sin, cos) share a frequency; frequencies run geometrically
/// from 1 down to 1e-4 as in the transformer family.
void encode_axis(Real index, int channels, Real* dst, int stride) {
  int pairs = (channels + 1) / 2;
  for (int p = 0; p < pairs; ++p) {
    Real freq = std::pow(10000.0, pairs == 1 ? 0.0 : -Real(p) / Real(pairs - 1));
    dst[2 * p * stride] = std::sin(index * freq);
    if (2 * p + 1 < channels) dst[(2 * p + 1) * stride] = std::cos(index * freq);
  }
}

}  // namespace

PositionalField make_positional_field(int channels, int h, int w, PeMode mode, int frames,
                                      Real weight) {
  if (channels < 2 || channels % 2 != 0)
    throw std::invalid_argument("make_positional_field: channels must be even and >= 2, got " +
                                std::to_string(channels));
  if (frames < 1) throw std::invalid_argument("make_positional_field: frames must be >= 1");

  PositionalField pe;
  pe.mode = mode;
  pe.weight = weight;

  if (mode == PeMode::TwoD) {
    pe.data = Tensor(1, channels, h, w);
    int row_c = channels / 2;
    int col_c = channels - row_c;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        Real* base = pe.data.data() + (static_cast<Eigen::Index>(y) * w + x);
        const Eigen::Index cstride = static_cast<Eigen::Index>(h) * w;
        encode_axis(Real(y), row_c, base, static_cast<int>(cstride));
        encode_axis(Real(x), col_c, base + static_cast<Eigen::Index>(row_c) * cstride,
                    static_cast<int>(cstride));
      }
  } else {
    pe.data = Tensor(frames, channels, h, w);
    int per_axis = channels / 3;
    int row_c = per_axis, col_c = per_axis;
    int frame_c = channels - 2 * per_axis;
    for (int f = 0; f < frames; ++f)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          Real* base = pe.data.data() + ((static_cast<Eigen::Index>(f) * channels) * h + y) * w + x;
          const Eigen::Index cstride = static_cast<Eigen::Index>(h) * w;
          encode_axis(Real(y), row_c, base, static_cast<int>(cstride));
          encode_axis(Real(x), col_c, base + static_cast<Eigen::Index>(row_c) * cstride,
                      static_cast<int>(cstride));
          encode_axis(Real(f), frame_c,
                      base + static_cast<Eigen::Index>(row_c + col_c) * cstride,
                      static_cast<int>(cstride));
        }
  }
  return pe;
}

FeatureMap add_positional_encoding(const FeatureMap& f, const PositionalField& pe) {
  const Tensor& d = f.data;
  if (pe.data.channels() != d.channels() || pe.data.height() != d.height() ||
      pe.data.width() != d.width())
    throw std::invalid_argument("add_positional_encoding: field dims do not match feature map");
  if (pe.mode == PeMode::ThreeD && pe.data.batch() != d.batch())
    throw std::invalid_argument("add_positional_encoding: 3d field frame count mismatch");

  FeatureMap out = f;
  if (pe.weight == 0.0) return out;
  for (int b = 0; b < d.batch(); ++b) {
    int src = pe.mode == PeMode::TwoD ? 0 : b;
    for (int c = 0; c < d.channels(); ++c)
      out.data.plane(b, c) += pe.weight * pe.data.plane(src, c);
  }
  return out;
}

GridMask GridMask::full(int h, int w) {
  GridMask g;
  g.h = h;
  g.w = w;
  g.mask = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(static_cast<Eigen::Index>(h) * w, true);
  return g;
}

CorrespondenceMap match_features(const FeatureMap& f_context, const FeatureMap& f_reference,
                                 const RegionMask& masks, int frame) {
  const Tensor& fc = f_context.data;
  const Tensor& fr = f_reference.data;
  if (fc.channels() != fr.channels())
    throw std::invalid_argument("match_features: channel count mismatch");
  const Eigen::Index nc = fc.plane_size(), nr = fr.plane_size();
  if (masks.context_mask.mask.size() != nc || masks.reference_mask.mask.size() != nr)
    throw std::invalid_argument("match_features: mask sizes do not match feature grids");
  if (masks.context_mask.count() == 0 || masks.reference_mask.count() == 0)
    throw std::invalid_argument("match_features: empty effective mask");

  Matrix vc = position_view(fc, frame);  // nc x c
  Matrix vr = position_view(fr, frame);  // nr x c

  // ||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b via one GEMM; the test oracle walks
  // the pairs directly instead
  Array c_sq = vc.rowwise().squaredNorm();
  Array r_sq = vr.rowwise().squaredNorm();
  Matrix cross = vc * vr.transpose();  // nc x nr

  std::vector<Eigen::Index> ref_idx;
  ref_idx.reserve(static_cast<size_t>(nr));
  for (Eigen::Index j = 0; j < nr; ++j)
    if (masks.reference_mask.mask[j]) ref_idx.push_back(j);

  CorrespondenceMap out;
  out.h = fc.height();
  out.w = fc.width();
  out.assignment = Eigen::ArrayXi::Constant(nc, -1);
  out.distances = Array::Zero(nc);
  out.valid = masks.context_mask.mask;

  for (Eigen::Index i = 0; i < nc; ++i) {
    if (!out.valid[i]) continue;
    Real best = std::numeric_limits<Real>::infinity();
    Eigen::Index best_j = ref_idx.front();
    for (Eigen::Index j : ref_idx) {
      Real d = c_sq[i] + r_sq[j] - 2.0 * cross(i, j);
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    out.assignment[i] = static_cast<int>(best_j);
    out.distances[i] = std::max(best, 0.0);  // GEMM rounding can dip below zero
  }
  return out;
}

FeatureMap rearrange(const FeatureMap& f_reference, const CorrespondenceMap& m, int frame) {
  const Tensor& fr = f_reference.data;
  const Eigen::Index n = static_cast<Eigen::Index>(m.h) * m.w;
  FeatureMap out;
  out.block_id = f_reference.block_id;
  out.timestep = f_reference.timestep;
  out.data = Tensor(1, fr.channels(), m.h, m.w);

  auto src = position_view(fr, frame);
  auto dst = position_view(out.data, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!m.valid[i]) continue;  // zero fill
    int j = m.assignment[i];
    if (j < 0 || j >= src.rows())
      throw std::invalid_argument("rearrange: assignment index " + std::to_string(j) +
                                  " out of range");
    dst.row(i) = src.row(j);
  }
  return out;
}

GridMask cluster_masks(const HeadMats& self_attn, int h, int w, int k, std::uint64_t seed) {
  if (self_attn.empty()) throw std::invalid_argument("cluster_masks: no attention heads");
  const Eigen::Index n = self_attn.front().rows();
  if (n != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("cluster_masks: attention rows do not match grid " +
                                std::to_string(h) + "x" + std::to_string(w));
  if (k < 1) throw std::invalid_argument("cluster_masks: k must be >= 1");

  Matrix profile = Matrix::Zero(n, self_attn.front().cols());
  for (const auto& head : self_attn) profile += head;
  profile /= Real(self_attn.size());

  GridMask out;
  out.h = h;
  out.w = w;
  out.mask = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n, false);

  if (k == 1) return GridMask::full(h, w);

  // degenerate input: all rows identical
  bool identical = true;
  for (Eigen::Index i = 1; i < n && identical; ++i)
    if ((profile.row(i) - profile.row(0)).cwiseAbs().maxCoeff() > 1e-12) identical = false;
  if (identical) {
    out = GridMask::full(h, w);
    out.degenerate = true;
    return out;
  }

  // k-means++ seeding, then Lloyd iterations (cap 100, tol 1e-6)
  NormalSampler rng(mix_seed(seed, 0x6b6dULL));
  std::vector<Eigen::Index> centers;
  centers.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  Array d2 = (profile.rowwise() - profile.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < k) {
    Real total = d2.sum();
    Eigen::Index pick = 0;
    if (total <= 0.0) {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      Real target = rng.uniform() * total;
      Real acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pick);
    Array nd = (profile.rowwise() - profile.row(pick)).rowwise().squaredNorm();
    d2 = d2.min(nd);
  }

  Matrix mu(k, profile.cols());
  for (int c = 0; c < k; ++c) mu.row(c) = profile.row(centers[static_cast<size_t>(c)]);

  Eigen::ArrayXi label = Eigen::ArrayXi::Zero(n);
  for (int iter = 0; iter < 100; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Real best = std::numeric_limits<Real>::infinity();
      int best_c = 0;
      for (int c = 0; c < k; ++c) {
        Real d = (profile.row(i) - mu.row(c)).squaredNorm();
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      label[i] = best_c;
    }
    Matrix nmu = Matrix::Zero(k, profile.cols());
    Eigen::ArrayXi count = Eigen::ArrayXi::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      nmu.row(label[i]) += profile.row(i);
      count[label[i]] += 1;
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // reseed an empty cluster to the farthest point from its center
        Eigen::Index far = 0;
        Real fd = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          Real d = (profile.row(i) - mu.row(label[i])).squaredNorm();
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        nmu.row(c) = profile.row(far);
        count[c] = 1;
      } else {
        nmu.row(c) /= Real(count[c]);
      }
    }
    Real shift = (nmu - mu).cwiseAbs().maxCoeff();
    mu = nmu;
    if (shift < 1e-6) break;
  }

  // foreground = cluster whose members receive the most attention
  Array received = profile.colwise().sum();  // attention received by each position
  Array score = Array::Zero(k);
  Eigen::ArrayXi count = Eigen::ArrayXi::Zero(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    score[label[i]] += received[i];
    count[label[i]] += 1;
  }
  int fg = 0;
  Real best_score = -std::numeric_limits<Real>::infinity();
  for (int c = 0; c < k; ++c) {
    Real mean = count[c] > 0 ? score[c] / Real(count[c]) : -std::numeric_limits<Real>::infinity();
    if (mean > best_score) {
      best_score = mean;
      fg = c;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) out.mask[i] = label[i] == fg;
  if (out.count() == 0) out = GridMask::full(h, w);
  return out;
}

GridMask resample_mask(const GridMask& m, int h, int w) {
  if (m.h == h && m.w == w) return m;
  GridMask out;
  out.h = h;
  out.w = w;
  out.degenerate = m.degenerate;
  out.mask = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(static_cast<Eigen::Index>(h) * w,
                                                             false);
  for (int y = 0; y < h; ++y) {
    int sy = std::min(m.h - 1, ((2 * y + 1) * m.h) / (2 * h));  // pixel-centre containment
    for (int x = 0; x < w; ++x) {
      int sx = std::min(m.w - 1, ((2 * x + 1) * m.w) / (2 * w));
      out.mask[static_cast<Eigen::Index>(y) * w + x] =
          m.mask[static_cast<Eigen::Index>(sy) * m.w + sx];
    }
  }
  if (out.count() == 0) return GridMask::full(h, w);
  return out;
}

Tensor pca_visualize(const FeatureMap& f, int frame) {
  const Tensor& d = f.data;
  const Eigen::Index n = d.plane_size();
  if (n < 3) throw std::invalid_argument("pca_visualize: need at least 3 positions");
  const int c = d.channels();

  Matrix v = position_view(d, frame);  // n x c
  Eigen::RowVectorXd mean = v.colwise().mean();
  Matrix centered = v.rowwise() - mean;
  Matrix cov = centered.transpose() * centered / Real(n);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca_visualize: eigensolver failed");

  Tensor img(1, 3, d.height(), d.width());
  for (int comp = 0; comp < 3; ++comp) {
    int col = c - 1 - comp;  // eigenvalues ascending; take the top ones
    if (col < 0) continue;   // rank-deficient channel stays zero
    if (eig.eigenvalues()[col] <= 1e-12) continue;
    Array proj = (centered * eig.eigenvectors().col(col)).array();
    Real lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (hi - lo < 1e-12) continue;
    img.plane(0, comp) = (proj - lo) / (hi - lo);
  }
  return img;
}

CorrespondenceMap shuffle_assignment(const CorrespondenceMap& m, const FeatureMap& f_context,
                                     const FeatureMap& f_reference, std::uint64_t seed,
                                     int frame) {
  CorrespondenceMap out = m;
  std::vector<Eigen::Index> valid_idx;
  for (Eigen::Index i = 0; i < m.valid.size(); ++i)
    if (m.valid[i]) valid_idx.push_back(i);
  if (valid_idx.size() < 2) return out;

  // seeded Fisher-Yates over the valid assignments
  NormalSampler rng(mix_seed(seed, 0x51afULL));
  std::vector<int> targets;
  targets.reserve(valid_idx.size());
  for (Eigen::Index i : valid_idx) targets.push_back(m.assignment[i]);
  for (size_t i = targets.size() - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(rng.below(i + 1));
    std::swap(targets[i], targets[j]);
  }

  auto vc = position_view(f_context.data, frame);
  auto vr = position_view(f_reference.data, frame);
  for (size_t k = 0; k < valid_idx.size(); ++k) {
    Eigen::Index i = valid_idx[k];
    out.assignment[i] = targets[k];
    out.distances[i] = (vc.row(i) - vr.row(targets[k])).squaredNorm();
  }
  return out;
}

}  // namespace semantix
