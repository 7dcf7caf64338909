#include "semantix/metrics.hpp"

#include "semantix/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace semantix {

namespace {

Matrix gram_of(const Matrix& features) {  // features: n x c
  return features.transpose() * features / Real(features.rows());
}

Matrix raw_level(const Tensor& img) {
  const Eigen::Index n = static_cast<Eigen::Index>(img.batch()) * img.plane_size();
  Matrix f(n, img.channels());
  Eigen::Index row = 0;
  for (int b = 0; b < img.batch(); ++b) {
    for (Eigen::Index i = 0; i < img.plane_size(); ++i) {
      for (int c = 0; c < img.channels(); ++c)
        f(row, c) = img.data()[(static_cast<Eigen::Index>(b) * img.channels() + c) *
                                   img.plane_size() +
                               i];
      ++row;
    }
  }
  return f;
}

Matrix patch_level(const Tensor& img, const GramFeatureSpec& spec) {
  const int p = spec.patch;
  const int ph = img.height() / p, pw = img.width() / p;
  if (ph < 1 || pw < 1)
    throw std::invalid_argument("gram_loss: image smaller than the patch size");
  const int m = img.channels() * p * p;
  Matrix proj =
      [&] {
        NormalSampler rng(mix_seed(spec.seed, 0x9a11ULL));
        Matrix pr(m, spec.patch_dims);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < spec.patch_dims; ++c) pr(r, c) = rng.next();
        return pr;
      }() /
      std::sqrt(Real(m));

  Matrix f(static_cast<Eigen::Index>(img.batch()) * ph * pw, spec.patch_dims);
  Eigen::Index row = 0;
  Eigen::RowVectorXd patch(m);
  for (int b = 0; b < img.batch(); ++b)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) {
        Eigen::Index col = 0;
        for (int c = 0; c < img.channels(); ++c)
          for (int u = 0; u < p; ++u)
            for (int v = 0; v < p; ++v) patch[col++] = img.at(b, c, y * p + u, x * p + v);
        f.row(row++) = patch * proj;
      }
  return f;
}

}  // namespace

Real gram_loss(const Tensor& a, const Tensor& b, const GramFeatureSpec& spec) {
  if (!a.same_shape(b)) throw std::invalid_argument("gram_loss: image dims differ");
  Real total = 0.0;
  int levels = 0;
  if (spec.raw_channels) {
    Matrix ga = gram_of(raw_level(a));
    Matrix gb = gram_of(raw_level(b));
    total += (ga - gb).squaredNorm() / Real(ga.size());
    ++levels;
  }
  if (spec.patch_projections) {
    Matrix ga = gram_of(patch_level(a, spec));
    Matrix gb = gram_of(patch_level(b, spec));
    total += (ga - gb).squaredNorm() / Real(ga.size());
    ++levels;
  }
  return levels == 0 ? 0.0 : total / Real(levels);
}

Real ssim(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("ssim: image dims differ");
  constexpr int kWindow = 11;
  constexpr Real kSigma = 1.5;
  constexpr Real kC1 = 0.01 * 0.01;
  constexpr Real kC2 = 0.03 * 0.03;
  if (a.height() < kWindow || a.width() < kWindow)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  if (a.array().minCoeff() < -1e-9 || a.array().maxCoeff() > 1.0 + 1e-9 ||
      b.array().minCoeff() < -1e-9 || b.array().maxCoeff() > 1.0 + 1e-9)
    throw std::invalid_argument("ssim: values must lie in [0,1]");

  // normalized Gaussian taps; window applied separably
  Array g(kWindow);
  for (int i = 0; i < kWindow; ++i) {
    Real d = Real(i - kWindow / 2);
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
  }
  g /= g.sum();

  auto blur = [&g](const Matrix& src) {
    const Eigen::Index oh = src.rows() - kWindow + 1, ow = src.cols() - kWindow + 1;
    Matrix tmp(src.rows(), ow);
    for (Eigen::Index r = 0; r < src.rows(); ++r)
      for (Eigen::Index c = 0; c < ow; ++c) {
        Real acc = 0;
        for (int k = 0; k < kWindow; ++k) acc += g[k] * src(r, c + k);
        tmp(r, c) = acc;
      }
    Matrix out(oh, ow);
    for (Eigen::Index r = 0; r < oh; ++r)
      for (Eigen::Index c = 0; c < ow; ++c) {
        Real acc = 0;
        for (int k = 0; k < kWindow; ++k) acc += g[k] * tmp(r + k, c);
        out(r, c) = acc;
      }
    return out;
  };

  Real total = 0.0;
  long planes = 0;
  for (int bi = 0; bi < a.batch(); ++bi) {
    for (int c = 0; c < a.channels(); ++c) {
      Matrix pa = Eigen::Map<const Matrix>(a.data() + (static_cast<Eigen::Index>(bi) *
                                                           a.channels() +
                                                       c) *
                                                          a.plane_size(),
                                           a.width(), a.height())
                      .transpose();
      Matrix pb = Eigen::Map<const Matrix>(b.data() + (static_cast<Eigen::Index>(bi) *
                                                           b.channels() +
                                                       c) *
                                                          b.plane_size(),
                                           b.width(), b.height())
                      .transpose();
      Matrix mu_a = blur(pa), mu_b = blur(pb);
      Matrix s_aa = blur(pa.cwiseProduct(pa)) - mu_a.cwiseProduct(mu_a);
      Matrix s_bb = blur(pb.cwiseProduct(pb)) - mu_b.cwiseProduct(mu_b);
      Matrix s_ab = blur(pa.cwiseProduct(pb)) - mu_a.cwiseProduct(mu_b);

      Matrix num = (2.0 * mu_a.cwiseProduct(mu_b).array() + kC1).matrix().cwiseProduct(
          (2.0 * s_ab.array() + kC2).matrix());
      Matrix den =
          (mu_a.array().square() + mu_b.array().square() + kC1)
              .matrix()
              .cwiseProduct((s_aa.array() + s_bb.array() + kC2).matrix());
      total += (num.array() / den.array()).mean();
      ++planes;
    }
  }
  return total / Real(planes);
}

MetricReport compare_images(const Tensor& a, const Tensor& b) {
  MetricReport r;
  r.gram_loss = gram_loss(a, b);
  r.ssim = ssim(a, b);
  r.recon_max_abs = max_abs_diff(a, b);
  return r;
}

}  // namespace semantix
