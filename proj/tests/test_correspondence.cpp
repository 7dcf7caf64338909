#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "semantix/correspondence.hpp"
#include "semantix/rng.hpp"

#include "oracles.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <set>

using namespace semantix;

namespace {

FeatureMap random_features(std::uint64_t seed, int c = 6, int h = 5, int w = 4, int b = 1) {
  NormalSampler rng(seed);
  FeatureMap f;
  f.data = rng.normal_tensor(b, c, h, w);
  return f;
}

std::vector<bool> to_vec(const Eigen::Array<bool, Eigen::Dynamic, 1>& m) {
  std::vector<bool> v(static_cast<size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) v[static_cast<size_t>(i)] = m[i];
  return v;
}

}  // namespace

TEST_CASE("positional field determinism and structure") {
  PositionalField a = make_positional_field(8, 8, 8, PeMode::TwoD);
  PositionalField b = make_positional_field(8, 8, 8, PeMode::TwoD);
  CHECK(max_abs_diff(a.data, b.data) == 0.0);

  SUBCASE("distinct grid positions have distinct encodings") {
    auto v = position_view(a.data, 0);
    Real min_d = std::numeric_limits<Real>::infinity();
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = i + 1; j < v.rows(); ++j)
        min_d = std::min(min_d, (v.row(i) - v.row(j)).norm());
    CHECK(min_d > 0.0);
  }

  SUBCASE("column channels are translation-structured") {
    // pe[:, i, j] - pe[:, i, j+1] constant in i for the column half
    for (int c = 4; c < 8; ++c)
      for (int j = 0; j + 1 < 8; ++j) {
        Real d0 = a.data.at(0, c, 0, j) - a.data.at(0, c, 0, j + 1);
        for (int i = 1; i < 8; ++i)
          CHECK(a.data.at(0, c, i, j) - a.data.at(0, c, i, j + 1) ==
                doctest::Approx(d0).epsilon(1e-12));
      }
  }

  SUBCASE("row channels depend only on the row index") {
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 8; ++i)
        for (int j = 1; j < 8; ++j)
          CHECK(a.data.at(0, c, i, j) == doctest::Approx(a.data.at(0, c, i, 0)).epsilon(1e-15));
  }

  SUBCASE("odd channel counts rejected") {
    CHECK_THROWS_AS(make_positional_field(7, 4, 4, PeMode::TwoD), std::invalid_argument);
  }

  SUBCASE("3d mode adds frame variation") {
    PositionalField f3 = make_positional_field(12, 4, 4, PeMode::ThreeD, 3);
    CHECK(f3.data.batch() == 3);
    Real diff = 0.0;
    for (int c = 0; c < 12; ++c)
      diff += (f3.data.plane(0, c) - f3.data.plane(2, c)).abs().maxCoeff();
    CHECK(diff > 0.0);
  }
}

TEST_CASE("add_positional_encoding") {
  FeatureMap f = random_features(1);
  SUBCASE("lambda = 0 is the identity, original untouched") {
    PositionalField pe = make_positional_field(6, 5, 4, PeMode::TwoD, 1, 0.0);
    FeatureMap out = add_positional_encoding(f, pe);
    CHECK(max_abs_diff(out.data, f.data) == 0.0);
  }
  SUBCASE("lambda = 3 adds the scaled field") {
    PositionalField pe = make_positional_field(6, 5, 4, PeMode::TwoD, 1, 3.0);
    FeatureMap out = add_positional_encoding(f, pe);
    Tensor want = f.data;
    for (int c = 0; c < 6; ++c) want.plane(0, c) += 3.0 * pe.data.plane(0, c);
    CHECK(max_abs_diff(out.data, want) < 1e-12);
    CHECK(max_abs_diff(f.data, random_features(1).data) == 0.0);  // input unmodified
  }
  SUBCASE("dim mismatch rejected") {
    PositionalField pe = make_positional_field(6, 4, 4, PeMode::TwoD, 1, 1.0);
    CHECK_THROWS_AS(add_positional_encoding(f, pe), std::invalid_argument);
  }
  SUBCASE("constant features + dominant PE match by position") {
    FeatureMap flat;
    flat.data = Tensor::constant(1, 6, 5, 4, 1.0);
    PositionalField pe = make_positional_field(6, 5, 4, PeMode::TwoD, 1, 100.0);
    FeatureMap enc = add_positional_encoding(flat, pe);
    RegionMask full = RegionMask::full(5, 4);
    CorrespondenceMap m = match_features(enc, enc, full);
    for (Eigen::Index i = 0; i < m.assignment.size(); ++i) CHECK(m.assignment[i] == int(i));
    // Gram-trick cancellation leaves ~1e-12 residue at lambda = 100
    CHECK(m.distances.maxCoeff() < 1e-8);
  }
}

TEST_CASE("match_features against the brute-force oracle") {
  SUBCASE("identity on equal maps") {
    FeatureMap f = random_features(3);
    RegionMask full = RegionMask::full(5, 4);
    CorrespondenceMap m = match_features(f, f, full);
    for (Eigen::Index i = 0; i < m.assignment.size(); ++i) {
      CHECK(m.assignment[i] == int(i));
      CHECK(m.distances[i] < 1e-12);
    }
  }

  SUBCASE("2x2 permuted reference recovers the inverse permutation") {
    // context vectors (1,0),(0,1),(1,1),(0,0); reference is a permutation
    FeatureMap fc, fr;
    fc.data = Tensor(1, 2, 2, 2);
    fr.data = Tensor(1, 2, 2, 2);
    const Real ctx[4][2] = {{1, 0}, {0, 1}, {1, 1}, {0, 0}};
    const int perm[4] = {2, 0, 3, 1};  // reference position p holds ctx[perm[p]]
    for (int p = 0; p < 4; ++p)
      for (int c = 0; c < 2; ++c) {
        fc.data.at(0, c, p / 2, p % 2) = ctx[p][c];
        fr.data.at(0, c, p / 2, p % 2) = ctx[perm[p]][c];
      }
    RegionMask full = RegionMask::full(2, 2);
    CorrespondenceMap m = match_features(fc, fr, full);
    auto oracle = oracles::brute_force_match(position_view(fc.data, 0), position_view(fr.data, 0),
                                             to_vec(full.context_mask.mask),
                                             to_vec(full.reference_mask.mask));
    for (int i = 0; i < 4; ++i) {
      CHECK(m.assignment[i] == oracle.assignment[size_t(i)]);
      // the permutation is inverted: position i maps to where ctx[i] lives
      CHECK(perm[m.assignment[i]] == i);
      CHECK(m.distances[i] < 1e-12);
    }
  }

  SUBCASE("random instances, full and random masks, 100% agreement") {
    NormalSampler mask_rng(77);
    for (int trial = 0; trial < 60; ++trial) {
      int h = 2 + int(mask_rng.below(15));  // up to 16
      int w = 2 + int(mask_rng.below(15));
      FeatureMap fc = random_features(1000 + trial, 5, h, w);
      FeatureMap fr = random_features(2000 + trial, 5, h, w);
      RegionMask masks = RegionMask::full(h, w);
      if (trial % 2 == 1) {
        for (Eigen::Index i = 0; i < masks.context_mask.mask.size(); ++i)
          masks.context_mask.mask[i] = mask_rng.uniform() < 0.7;
        for (Eigen::Index i = 0; i < masks.reference_mask.mask.size(); ++i)
          masks.reference_mask.mask[i] = mask_rng.uniform() < 0.7;
        if (masks.context_mask.count() == 0) masks.context_mask.mask[0] = true;
        if (masks.reference_mask.count() == 0) masks.reference_mask.mask[0] = true;
      }
      CorrespondenceMap m = match_features(fc, fr, masks);
      auto oracle = oracles::brute_force_match(
          position_view(fc.data, 0), position_view(fr.data, 0), to_vec(masks.context_mask.mask),
          to_vec(masks.reference_mask.mask));
      for (Eigen::Index i = 0; i < m.assignment.size(); ++i) {
        CHECK(m.assignment[i] == oracle.assignment[size_t(i)]);
        if (m.valid[i]) CHECK(std::abs(m.distances[i] - oracle.distances[size_t(i)]) < 1e-6);
      }
    }
  }

  SUBCASE("mask excluding the true nearest neighbour falls to the masked optimum") {
    FeatureMap fc = random_features(5, 4, 3, 3);
    FeatureMap fr = fc;  // nearest is the identity
    RegionMask masks = RegionMask::full(3, 3);
    masks.reference_mask.mask[4] = false;  // exclude position 4's own match
    CorrespondenceMap m = match_features(fc, fr, masks);
    auto oracle = oracles::brute_force_match(position_view(fc.data, 0), position_view(fr.data, 0),
                                             to_vec(masks.context_mask.mask),
                                             to_vec(masks.reference_mask.mask));
    CHECK(m.assignment[4] == oracle.assignment[4]);
    CHECK(m.assignment[4] != 4);
  }

  SUBCASE("ties break to the smallest linear index") {
    FeatureMap fc, fr;
    fc.data = Tensor::constant(1, 2, 1, 2, 1.0);
    fr.data = Tensor::constant(1, 2, 1, 2, 1.0);  // all reference vectors equal
    RegionMask full = RegionMask::full(1, 2);
    CorrespondenceMap m = match_features(fc, fr, full);
    CHECK(m.assignment[0] == 0);
    CHECK(m.assignment[1] == 0);
  }

  SUBCASE("empty effective mask rejected") {
    FeatureMap f = random_features(6);
    RegionMask masks = RegionMask::full(5, 4);
    masks.reference_mask.mask.setConstant(false);
    CHECK_THROWS_AS(match_features(f, f, masks), std::invalid_argument);
  }

  SUBCASE("channel mismatch rejected") {
    FeatureMap fc = random_features(7, 4);
    FeatureMap fr = random_features(8, 6);
    CHECK_THROWS_AS(match_features(fc, fr, RegionMask::full(5, 4)), std::invalid_argument);
  }
}

TEST_CASE("rearrange") {
  FeatureMap fr = random_features(9);
  SUBCASE("identity assignment returns the reference") {
    CorrespondenceMap m;
    m.h = 5;
    m.w = 4;
    m.assignment = Eigen::ArrayXi::LinSpaced(20, 0, 19);
    m.distances = Array::Zero(20);
    m.valid = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(20, true);
    FeatureMap out = rearrange(fr, m);
    CHECK(max_abs_diff(out.data, fr.data) == 0.0);
  }
  SUBCASE("constant reference is assignment-blind") {
    FeatureMap flat;
    flat.data = Tensor::constant(1, 3, 5, 4, 2.5);
    CorrespondenceMap m;
    m.h = 5;
    m.w = 4;
    m.assignment = Eigen::ArrayXi::Constant(20, 7);
    m.distances = Array::Zero(20);
    m.valid = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(20, true);
    FeatureMap out = rearrange(flat, m);
    CHECK((out.data.array() - 2.5).abs().maxCoeff() == 0.0);
  }
  SUBCASE("match-then-rearrange on identical maps reproduces the reference") {
    CorrespondenceMap m = match_features(fr, fr, RegionMask::full(5, 4));
    FeatureMap out = rearrange(fr, m);
    CHECK(max_abs_diff(out.data, fr.data) == 0.0);
  }
  SUBCASE("invalid positions are zero-filled") {
    CorrespondenceMap m = match_features(fr, fr, RegionMask::full(5, 4));
    m.valid[3] = false;
    FeatureMap out = rearrange(fr, m);
    auto v = position_view(out.data, 0);
    CHECK(v.row(3).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("preserves channel count and spatial dims") {
    CorrespondenceMap m = match_features(fr, fr, RegionMask::full(5, 4));
    FeatureMap out = rearrange(fr, m);
    CHECK(out.data.channels() == fr.data.channels());
    CHECK(out.data.height() == fr.data.height());
    CHECK(out.data.width() == fr.data.width());
  }
}

TEST_CASE("cluster_masks") {
  SUBCASE("planted two-block structure recovered exactly") {
    // 4x4 grid: first 8 positions share one attention profile, rest another
    const int n = 16;
    Matrix profile(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        bool row_top = i < 8, col_top = j < 8;
        profile(i, j) = row_top == col_top ? 0.115 : 0.01;
      }
    for (int i = 0; i < n; ++i) profile.row(i) /= profile.row(i).sum();
    HeadMats attn{profile};
    GridMask m = cluster_masks(attn, 4, 4, 2, 5);
    // one of the two blocks is the foreground; membership must split 8/8
    bool first = m.mask[0];
    for (int i = 0; i < 8; ++i) CHECK(m.mask[i] == first);
    for (int i = 8; i < 16; ++i) CHECK(m.mask[i] == !first);
  }

  SUBCASE("k = 1 returns the full mask") {
    NormalSampler rng(3);
    Matrix profile(9, 9);
    for (Eigen::Index i = 0; i < profile.size(); ++i) profile.data()[i] = std::abs(rng.next());
    HeadMats attn{profile};
    GridMask m = cluster_masks(attn, 3, 3, 1, 5);
    CHECK(m.count() == 9);
  }

  SUBCASE("fixed seed gives identical masks") {
    NormalSampler rng(11);
    Matrix profile(16, 16);
    for (Eigen::Index i = 0; i < profile.size(); ++i) profile.data()[i] = std::abs(rng.next());
    HeadMats attn{profile};
    GridMask a = cluster_masks(attn, 4, 4, 2, 9);
    GridMask b = cluster_masks(attn, 4, 4, 2, 9);
    CHECK((a.mask == b.mask).all());
  }

  SUBCASE("degenerate all-identical input returns the flagged full mask") {
    Matrix profile = Matrix::Constant(16, 16, 1.0 / 16.0);
    HeadMats attn{profile};
    GridMask m = cluster_masks(attn, 4, 4, 2, 1);
    CHECK(m.degenerate);
    CHECK(m.count() == 16);
  }
}

TEST_CASE("resample_mask") {
  GridMask src;
  src.h = 2;
  src.w = 2;
  src.mask = Eigen::Array<bool, Eigen::Dynamic, 1>(4);
  src.mask << true, false, false, true;
  GridMask up = resample_mask(src, 4, 4);
  CHECK(up.h == 4);
  // each source cell becomes a 2x2 block
  CHECK(up.mask[0]);
  CHECK(up.mask[1]);
  CHECK_FALSE(up.mask[2]);
  CHECK(up.mask[15]);
  GridMask same = resample_mask(src, 2, 2);
  CHECK((same.mask == src.mask).all());
}

TEST_CASE("pca_visualize") {
  SUBCASE("output in [0,1]^3") {
    FeatureMap f = random_features(21, 8, 6, 6);
    Tensor img = pca_visualize(f);
    CHECK(img.array().minCoeff() >= 0.0);
    CHECK(img.array().maxCoeff() <= 1.0);
    CHECK(img.channels() == 3);
    CHECK(img.height() == 6);
  }

  SUBCASE("rank-1 features leave components 2,3 zero") {
    FeatureMap f;
    f.data = Tensor(1, 4, 4, 4);
    NormalSampler rng(13);
    Eigen::VectorXd dir(4);
    for (int i = 0; i < 4; ++i) dir[i] = rng.next();
    auto v = position_view(f.data, 0);
    for (Eigen::Index i = 0; i < v.rows(); ++i) v.row(i) = rng.next() * dir.transpose();
    Tensor img = pca_visualize(f);
    CHECK(img.plane(0, 1).abs().maxCoeff() == 0.0);
    CHECK(img.plane(0, 2).abs().maxCoeff() == 0.0);
  }

  SUBCASE("explained variance matches an SVD oracle") {
    FeatureMap f = random_features(23, 7, 5, 5);
    Matrix v = position_view(f.data, 0);
    Matrix centered = v.rowwise() - v.colwise().mean();
    // oracle route: singular values of the centered data
    Eigen::JacobiSVD<Matrix> svd(centered);
    Array sv = svd.singularValues().array();
    Array var_oracle = sv.square() / Real(v.rows());
    // implementation route: eigenvalues of the covariance
    Matrix cov = centered.transpose() * centered / Real(v.rows());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    Array ev = eig.eigenvalues().array().reverse();
    for (int i = 0; i < 3; ++i) CHECK(std::abs(ev[i] - var_oracle[i]) < 1e-6);
  }

  SUBCASE("fewer than 3 positions rejected") {
    FeatureMap f = random_features(25, 4, 1, 2);
    CHECK_THROWS_AS(pca_visualize(f), std::invalid_argument);
  }
}

TEST_CASE("shuffle_assignment") {
  FeatureMap fc = random_features(31, 5, 4, 4);
  FeatureMap fr = random_features(32, 5, 4, 4);
  RegionMask masks = RegionMask::full(4, 4);
  masks.context_mask.mask[2] = false;
  CorrespondenceMap m = match_features(fc, fr, masks);

  SUBCASE("seed-fixed shuffle is deterministic") {
    CorrespondenceMap a = shuffle_assignment(m, fc, fr, 7);
    CorrespondenceMap b = shuffle_assignment(m, fc, fr, 7);
    CHECK((a.assignment == b.assignment).all());
  }

  SUBCASE("multiset of assigned indices is preserved") {
    CorrespondenceMap sh = shuffle_assignment(m, fc, fr, 9);
    std::multiset<int> before, after;
    for (Eigen::Index i = 0; i < m.assignment.size(); ++i)
      if (m.valid[i]) {
        before.insert(m.assignment[i]);
        after.insert(sh.assignment[i]);
      }
    CHECK(before == after);
    CHECK_FALSE(sh.valid[2]);  // invalid rows untouched
  }

  SUBCASE("distances recomputed against the shuffled targets") {
    CorrespondenceMap sh = shuffle_assignment(m, fc, fr, 11);
    auto vc = position_view(fc.data, 0);
    auto vr = position_view(fr.data, 0);
    for (Eigen::Index i = 0; i < sh.assignment.size(); ++i) {
      if (!sh.valid[i]) continue;
      Real want = (vc.row(i) - vr.row(sh.assignment[i])).squaredNorm();
      CHECK(std::abs(sh.distances[i] - want) < 1e-9);
    }
  }
}
