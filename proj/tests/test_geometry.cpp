#include <gtest/gtest.h>

#include "ddon/geometry.hpp"
#include "ddon/rng.hpp"

using namespace ddon;

namespace {

Box rect(double x0, double y0, double x1, double y1) { return make_box({x0, y0}, {x1, y1}); }

}  // namespace

TEST(Box, RejectsInvertedExtent) {
  EXPECT_THROW(make_box({0, 1}, {1, 1}), GeometryError);
  EXPECT_NO_THROW(make_box({0, 0, 0}, {1, 2, 3}));
}

TEST(OverlapPartition, ReferenceSplitOnY) {
  const auto d = make_overlap_partition(rect(0, 0, 1, 2), 1, 0.75, 1.25);
  ASSERT_EQ(d.geometry.size(), 2u);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[0].lo[1], 0.0);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[0].hi[1], 1.25);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[1].lo[1], 0.75);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[1].hi[1], 2.0);
  ASSERT_EQ(d.interfaces.size(), 2u);
  EXPECT_EQ(d.interfaces[0].owner_a, "D1");
  EXPECT_DOUBLE_EQ(d.interfaces[0].patch.lo[1], 1.25);
  EXPECT_EQ(d.interfaces[0].orientation_from_a, 1);
  EXPECT_EQ(d.interfaces[1].owner_a, "D2");
  EXPECT_DOUBLE_EQ(d.interfaces[1].patch.lo[1], 0.75);
  EXPECT_EQ(d.interfaces[1].orientation_from_a, -1);
}

TEST(OverlapPartition, ThinOverlapIsLegal) {
  EXPECT_NO_THROW(make_overlap_partition(rect(0, 0, 1, 2), 1, 0.999, 1.001));
}

TEST(OverlapPartition, Errors) {
  EXPECT_THROW(make_overlap_partition(rect(0, 0, 1, 2), 1, 1.25, 0.75), OrderingError);
  EXPECT_THROW(make_overlap_partition(rect(0, 0, 1, 2), 1, -0.5, 1.0), RangeError);
  EXPECT_THROW(make_overlap_partition(rect(0, 0, 1, 2), 1, 0.5, 2.0), RangeError);
}

TEST(NonOverlapPartition, TwoUnitBoxes) {
  const auto d = make_nonoverlap_partition(rect(0, 0, 1, 2), 1, {1.0});
  ASSERT_EQ(d.geometry.size(), 2u);
  ASSERT_EQ(d.interfaces.size(), 1u);
  EXPECT_DOUBLE_EQ(d.interfaces[0].patch.lo[1], 1.0);
  EXPECT_DOUBLE_EQ(d.interfaces[0].patch.hi[1], 1.0);
  EXPECT_EQ(d.interfaces[0].normal_axis, 1);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[0].extent(1), 1.0);
  EXPECT_DOUBLE_EQ(d.geometry.boxes[1].extent(1), 1.0);
}

TEST(NonOverlapPartition, EmptyCuts) {
  const auto d = make_nonoverlap_partition(rect(0, 0, 1, 2), 1, {});
  EXPECT_EQ(d.geometry.size(), 1u);
  EXPECT_TRUE(d.interfaces.empty());
}

TEST(NonOverlapPartition, ThreeBoxes) {
  const auto d = make_nonoverlap_partition(rect(0, 0, 3, 1), 0, {1.0, 2.0});
  EXPECT_EQ(d.geometry.size(), 3u);
  EXPECT_EQ(d.interfaces.size(), 2u);
  EXPECT_EQ(d.interfaces[0].owner_a, "D1");
  EXPECT_EQ(d.interfaces[0].owner_b, "D2");
  EXPECT_EQ(d.interfaces[1].owner_a, "D2");
  EXPECT_EQ(d.interfaces[1].owner_b, "D3");
}

TEST(NonOverlapPartition, Errors) {
  EXPECT_THROW(make_nonoverlap_partition(rect(0, 0, 3, 1), 0, {2.0, 1.0}), OrderingError);
  EXPECT_THROW(make_nonoverlap_partition(rect(0, 0, 3, 1), 0, {3.0}), RangeError);
}

TEST(Composite, RejectsDisconnectedAndDuplicateLabels) {
  EXPECT_THROW(make_composite({rect(0, 0, 1, 1), rect(2, 0, 3, 1)}, {"a", "b"}), GeometryError);
  EXPECT_THROW(make_composite({rect(0, 0, 1, 1), rect(1, 0, 2, 1)}, {"a", "a"}), GeometryError);
  // corner contact only is not a connection
  EXPECT_THROW(make_composite({rect(0, 0, 1, 1), rect(1, 1, 2, 2)}, {"a", "b"}), GeometryError);
}

TEST(Composite, PartialFaceContactRejected) {
  const auto g = make_composite({rect(0, 0, 1, 1), rect(1, 0.5, 2, 2)}, {"a", "b"});
  EXPECT_THROW(find_interfaces(g), GeometryError);
}

TEST(LShape, ReferenceParameters) {
  const auto s = decompose_L_shape({2, 2, 2, 5, 6, 3});
  const auto& g = s.decomposition.geometry;
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(s.decomposition.interfaces.size(), 2u);
  // arm along x: (l1+l3)*w1*h, corner: w2*w1*h, arm along y: l2*w2*h
  const double hand = (5 + 3) * 2 * 2 + 2 * 2 * 2 + 6 * 2 * 2;
  EXPECT_DOUBLE_EQ(hand, 64.0);
  EXPECT_NEAR(g.volume_sum(), hand, 1e-12);
  EXPECT_TRUE(s.decomposition.warnings.empty());
  // corner adjacent to both arms
  for (const auto& itf : s.decomposition.interfaces)
    EXPECT_TRUE(itf.owner_a == "sub2" || itf.owner_b == "sub2");
}

TEST(LShape, MinimumRange) {
  const auto s = decompose_L_shape({1, 1, 1, 4, 5, 2});
  EXPECT_EQ(s.decomposition.geometry.size(), 3u);
  EXPECT_TRUE(s.decomposition.warnings.empty());
}

TEST(LShape, NonPositive) {
  EXPECT_THROW(decompose_L_shape({2, 2, 2, 0, 6, 3}), NonPositiveError);
  EXPECT_THROW(decompose_L_shape({-1, 2, 2, 5, 6, 3}), NonPositiveError);
}

TEST(LShape, OutOfRangeWarns) {
  const auto s = decompose_L_shape({2, 2, 2, 9, 6, 3});
  EXPECT_EQ(s.decomposition.warnings.size(), 1u);
}

TEST(LShape, BoxesInteriorDisjointProperty) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    ShapeParams p{rng.uniform(1, 3), rng.uniform(1, 3), rng.uniform(1, 3),
                  rng.uniform(4, 6), rng.uniform(5, 8), rng.uniform(2, 5)};
    const auto s = decompose_L_shape(p);
    const auto& b = s.decomposition.geometry.boxes;
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = i + 1; j < b.size(); ++j)
        EXPECT_NE(detail::contact(b[i], b[j]), detail::Contact::Volume);
  }
}

TEST(TShape, FourBoxesThreeInterfaces) {
  const auto s = decompose_T_shape({2, 2, 2, 5, 6, 3});
  EXPECT_EQ(s.decomposition.geometry.size(), 4u);
  EXPECT_EQ(s.decomposition.interfaces.size(), 3u);
  const double hand = 5 * 2 * 2 + 2 * 2 * 2 + 3 * 2 * 2 + 6 * 2 * 2;
  EXPECT_NEAR(s.decomposition.geometry.volume_sum(), hand, 1e-12);
}

TEST(Stretching, Rectangle) {
  const auto s = stretching_map(rect(0, 0, 2, 1));
  EXPECT_DOUBLE_EQ(s.map.scale[0], 0.5);
  EXPECT_DOUBLE_EQ(s.map.scale[1], 1.0);
  EXPECT_DOUBLE_EQ(s.coefficients[0], 0.25);
  EXPECT_DOUBLE_EQ(s.coefficients[1], 1.0);
}

TEST(Stretching, UnitBoxIsIdentity) {
  const auto s = stretching_map(unit_box(3));
  for (int k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(s.map.scale[k], 1.0);
    EXPECT_DOUBLE_EQ(s.map.shift[k], 0.0);
    EXPECT_DOUBLE_EQ(s.coefficients[k], 1.0);
  }
}

TEST(Stretching, ShiftedCube) {
  const auto s = stretching_map(make_box({1, 1, 1}, {3, 3, 3}));
  for (int k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(s.map.shift[k], -1.0);
    EXPECT_DOUBLE_EQ(s.map.scale[k], 0.5);
    EXPECT_DOUBLE_EQ(s.coefficients[k], 0.25);
  }
  const Box u = s.map.apply(make_box({1, 1, 1}, {3, 3, 3}));
  EXPECT_EQ(u, unit_box(3));
}

TEST(Stretching, RoundTripProperty) {
  Rng rng(5);
  const Box b = make_box({-1.5, 0.25, 3}, {2.0, 0.75, 9});
  const auto s = stretching_map(b);
  const auto inv = s.map.inverse();
  for (int t = 0; t < 1000; ++t) {
    const Point x{rng.uniform(-1.5, 2.0), rng.uniform(0.25, 0.75), rng.uniform(3, 9)};
    const Point a = s.map.invert(s.map.apply(x));
    const Point c = inv.apply(s.map.apply(x));
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(a[k], x[k], 1e-12);
      EXPECT_NEAR(c[k], x[k], 1e-12);
    }
  }
}

TEST(PartitionProperty, VolumesSum) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const Box dom = make_box({0, 0, 0}, {rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(1, 4)});
    const int axis = static_cast<int>(rng.below(3));
    std::vector<double> cuts;
    const int nc = static_cast<int>(rng.below(4));
    for (int c = 0; c < nc; ++c) cuts.push_back(dom.hi[axis] * (c + 1) / (nc + 1) + 0.01 * rng.uniform());
    const auto d = make_nonoverlap_partition(dom, axis, cuts);
    EXPECT_NEAR(d.geometry.volume_sum(), dom.volume(), 1e-12 * dom.volume());
    EXPECT_EQ(d.interfaces.size(), cuts.size());

    const double lo = rng.uniform(0.1, 0.45) * dom.hi[axis];
    const double hi = rng.uniform(0.55, 0.9) * dom.hi[axis];
    const auto o = make_overlap_partition(dom, axis, lo, hi);
    const double inter = intersect(o.geometry.boxes[0], o.geometry.boxes[1]).volume();
    EXPECT_NEAR(o.geometry.volume_sum() - inter, dom.volume(), 1e-12 * dom.volume());
  }
}
