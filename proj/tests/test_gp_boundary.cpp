#include <gtest/gtest.h>

#include <cmath>

#include "ddon/gp_boundary.hpp"

using namespace ddon;

TEST(SampleGp, SinglePointUnitVariance) {
  GpSpec spec;
  spec.seed = 3;
  const std::vector<Point> pts{{0.2, 0.4, 0}};
  const auto d = sample_gp(spec, pts, 100000);
  const double mean = d.mean();
  const double var = (d.array() - mean).square().mean();
  EXPECT_NEAR(var, 1.0, 0.02);
  EXPECT_NEAR(mean, 0.0, 0.02);
}

TEST(SampleGp, DuplicatePointsRejected) {
  const std::vector<Point> pts{{0.5, 0.5, 0}, {0.5, 0.5, 0}};
  EXPECT_THROW(sample_gp(GpSpec{}, pts, 1), PreconditionError);
}

TEST(SampleGp, CorrelationMatchesKernel) {
  GpSpec spec;
  spec.seed = 17;
  const std::vector<Point> pts{{0, 0, 0}, {0.5, 0, 0}};
  const auto d = sample_gp(spec, pts, 100000);
  const Eigen::VectorXd a = d.col(0).array() - d.col(0).mean();
  const Eigen::VectorXd b = d.col(1).array() - d.col(1).mean();
  const double corr = a.dot(b) / (a.norm() * b.norm());
  const double expected = std::exp(-0.25 / 0.5);
  EXPECT_NEAR(expected, 0.6065, 1e-4);
  EXPECT_NEAR(corr, expected, 0.01);
}

TEST(SampleGp, CovarianceSymmetricWithUnitDiagonal) {
  Rng rng(1);
  std::vector<Point> pts;
  for (int i = 0; i < 40; ++i) pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  const auto k = gp_covariance(GpSpec{}, pts);
  EXPECT_EQ((k - k.transpose()).cwiseAbs().maxCoeff(), 0.0);
  for (Eigen::Index i = 0; i < k.rows(); ++i) EXPECT_EQ(k(i, i), 1.0);
}

TEST(SampleGp, DeterministicGivenSeed) {
  GpSpec spec;
  spec.seed = 99;
  const auto pts = patch_points(make_patch({0, 0, 1}, {1, 1, 1}), GridCounts{9, 9, 1});
  const auto a = sample_gp(spec, pts, 5);
  const auto b = sample_gp(spec, pts, 5);
  EXPECT_TRUE((a.array() == b.array()).all());
  spec.seed = 100;
  EXPECT_FALSE((sample_gp(spec, pts, 5).array() == a.array()).all());
}

TEST(SampleGp, ZeroJitterOnDenseGridFails) {
  GpSpec spec;
  spec.jitter = 0.0;
  std::vector<Point> pts;
  for (int i = 0; i < 200; ++i) pts.push_back({i * 1e-4, 0, 0});
  EXPECT_THROW(sample_gp(spec, pts, 1), FactorizationError);
}

TEST(SampleGp, InvalidSpec) {
  GpSpec spec;
  spec.correlation_length = 0;
  const std::vector<Point> pts{{0, 0, 0}};
  EXPECT_THROW(sample_gp(spec, pts, 1), PreconditionError);
  EXPECT_THROW(sample_gp(GpSpec{}, pts, 0), PreconditionError);
}

TEST(InterfaceSpace, RepeatCallsIdentical) {
  const auto d = make_nonoverlap_partition(make_box({0, 0, 0}, {1, 1, 2}), 2, {1.0});
  GpSpec spec;
  spec.seed = 5;
  const auto a = sample_interface_space(spec, d.interfaces[0], GridCounts{11, 11, 1}, 1);
  const auto b = sample_interface_space(spec, d.interfaces[0], GridCounts{11, 11, 1}, 1);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].values.size(), 121u);
  EXPECT_EQ(a[0].values, b[0].values);
  for (const auto& p : a[0].points) EXPECT_DOUBLE_EQ(p[2], 1.0);
}

TEST(InterfaceSpace, TranslationInvariant) {
  GpSpec spec;
  spec.seed = 8;
  Interface lo{"a", "b", make_patch({0, 0, 1}, {1, 1, 1}), 2, 1};
  Interface hi{"a", "b", make_patch({3, 2, 7}, {4, 3, 7}), 2, 1};
  const auto a = sample_interface_space(spec, lo, GridCounts{7, 7, 1}, 3);
  const auto b = sample_interface_space(spec, hi, GridCounts{7, 7, 1}, 3);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(a[s].values, b[s].values);
}

TEST(InterfaceSpace, SmoothnessBaseline) {
  // adjacent-node jumps stay below 6 sigma h / l on a 25x25 unit face
  GpSpec spec;
  spec.seed = 21;
  Interface itf{"a", "b", make_patch({0, 0, 0}, {1, 1, 0}), 2, 1};
  const auto traces = sample_interface_space(spec, itf, GridCounts{25, 25, 1}, 1000);
  const double h = 1.0 / 24.0;
  double worst = 0;
  for (const auto& t : traces)
    for (int i = 0; i < 25; ++i)
      for (int j = 0; j < 25; ++j) {
        const double v = t.values[static_cast<std::size_t>(i * 25 + j)];
        if (i + 1 < 25) worst = std::max(worst, std::abs(t.values[static_cast<std::size_t>((i + 1) * 25 + j)] - v));
        if (j + 1 < 25) worst = std::max(worst, std::abs(t.values[static_cast<std::size_t>(i * 25 + j + 1)] - v));
      }
  EXPECT_LT(worst, 6.0 * h / 0.5);
  EXPECT_GT(worst, 0.0);
}
