#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_util.hpp"

using namespace dqs3d;
using dqs3d::testing::random_box;
using dqs3d::testing::random_point;

namespace {

OrientedBox example_box() {
  OrientedBox b;
  b.center = {1.0, 2.0, 0.5};
  b.dims = {0.6, 0.8, 1.0};
  return b;
}

void expect_deltas_near(const BoxDeltas& a, const BoxDeltas& b, double tol) {
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(a[i], b[i], tol) << "component " << i;
}

}  // namespace

TEST(Encode, FaceDistancesAndMobiusPair) {
  const BoxDeltas d = encode(example_box(), {0.9, 1.9, 0.4});
  expect_deltas_near(d, BoxDeltas{{0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.0, std::log(0.75)}}, 1e-12);
  EXPECT_NEAR(d[7], -0.28768, 1e-5);
}

TEST(Encode, AnchorAtCenterGivesHalfExtents) {
  const OrientedBox b = example_box();
  const BoxDeltas d = encode(b, b.center);
  EXPECT_DOUBLE_EQ(d[0], 0.3);
  EXPECT_DOUBLE_EQ(d[1], 0.3);
  EXPECT_DOUBLE_EQ(d[2], 0.4);
  EXPECT_DOUBLE_EQ(d[3], 0.4);
  EXPECT_DOUBLE_EQ(d[4], 0.5);
  EXPECT_DOUBLE_EQ(d[5], 0.5);
}

TEST(Encode, SquareFootprintHasZeroMobiusPair) {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 100; ++n) {
    OrientedBox b = random_box(rng);
    b.dims.y = b.dims.x;
    const BoxDeltas d = encode(b, random_point(rng, 5.0));
    EXPECT_EQ(d[6], 0.0);
    EXPECT_EQ(d[7], 0.0);
  }
}

TEST(Encode, InvariantsOnRandomBoxes) {
  std::mt19937_64 rng(2);
  for (int n = 0; n < 10000; ++n) {
    const OrientedBox b = random_box(rng);
    const BoxDeltas d = encode(b, random_point(rng, 5.0));
    ASSERT_NEAR(d[0] + d[1], b.dims.x, 1e-9);
    ASSERT_NEAR(d[2] + d[3], b.dims.y, 1e-9);
    ASSERT_NEAR(d[4] + d[5], b.dims.z, 1e-9);
    const double lr = std::log(b.dims.x / b.dims.y);
    ASSERT_NEAR(d[6] * d[6] + d[7] * d[7], lr * lr, 1e-9);
  }
}

TEST(Encode, AnchorInsideAxisAlignedBoxGivesPositiveDistances) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.49, 0.49);
  for (int n = 0; n < 1000; ++n) {
    const OrientedBox b = random_box(rng, false);
    const Point3 a = b.center + Point3{u(rng) * b.dims.x, u(rng) * b.dims.y, u(rng) * b.dims.z};
    const BoxDeltas d = encode(b, a);
    for (std::size_t i = 0; i < 6; ++i) ASSERT_GT(d[i], 0.0);
  }
}

TEST(Encode, RejectsNonPositiveDims) {
  OrientedBox b = example_box();
  b.dims.y = 0.0;
  EXPECT_THROW(encode(b, {0, 0, 0}), InvalidBox);
  b.dims.y = -1.0;
  EXPECT_THROW(encode(b, {0, 0, 0}), InvalidBox);
}

TEST(Decode, RecoversExampleUpToMobiusClass) {
  const Point3 a{0.9, 1.9, 0.4};
  const OrientedBox b = decode(encode(example_box(), a), a);
  EXPECT_NEAR(b.center.x, 1.0, 1e-12);
  EXPECT_NEAR(b.center.y, 2.0, 1e-12);
  EXPECT_NEAR(b.center.z, 0.5, 1e-12);
  // (yaw 0, 0.6 x 0.8) and (yaw pi/2, 0.8 x 0.6) are the same box.
  EXPECT_NEAR(b.dims.x, 0.8, 1e-12);
  EXPECT_NEAR(b.dims.y, 0.6, 1e-12);
  EXPECT_NEAR(std::abs(b.yaw), 0.5 * std::numbers::pi, 1e-12);
  const OrientedBox aligned = to_axis_aligned(b);
  EXPECT_NEAR(aligned.dims.x, 0.6, 1e-12);
  EXPECT_NEAR(aligned.dims.y, 0.8, 1e-12);
}

TEST(Decode, SquareFootprintReportsZeroYaw) {
  BoxDeltas d{{0.5, 0.5, 0.5, 0.5, 0.2, 0.3, 0.0, 0.0}};
  const OrientedBox b = decode(d, {0, 0, 0});
  EXPECT_EQ(b.yaw, 0.0);
  EXPECT_EQ(b.dims, (Point3{1.0, 1.0, 0.5}));
}

TEST(Decode, RoundTripOnRandomBoxes) {
  std::mt19937_64 rng(4);
  for (int n = 0; n < 10000; ++n) {
    const OrientedBox b = random_box(rng);
    const Point3 a = b.center + random_point(rng, 1.0);
    const OrientedBox r = decode(encode(b, a), a);
    ASSERT_LT(norm(r.center - b.center), 1e-9);
    ASSERT_NEAR(r.dims.z, b.dims.z, 1e-9);
    ASSERT_GE(r.dims.x, r.dims.y);
    const bool swapped = b.dims.x < b.dims.y;
    ASSERT_NEAR(r.dims.x, swapped ? b.dims.y : b.dims.x, 1e-9);
    ASSERT_NEAR(r.dims.y, swapped ? b.dims.x : b.dims.y, 1e-9);
    // Heading equal modulo pi (and modulo pi/2 with the w/l swap).
    const double expected = b.yaw + (swapped ? 0.5 * std::numbers::pi : 0.0);
    const double diff = std::remainder(r.yaw - expected, std::numbers::pi);
    ASSERT_LT(std::abs(diff), 1e-6);
  }
}

TEST(Decode, RejectsDegenerateExtents) {
  EXPECT_THROW(decode(BoxDeltas{{0.1, -0.1, 0.5, 0.5, 0.5, 0.5, 0, 0}}, {0, 0, 0}), InvalidDeltas);
  EXPECT_THROW(decode_aabb(BoxDeltas{{0.1, 0.1, 0.5, -0.6, 0.5, 0.5, 0, 0}}, {0, 0, 0}), InvalidDeltas);
  EXPECT_THROW(decode(BoxDeltas{{0.1, 0.1, 0.5, 0.5, 0.5, 0.5, std::nan(""), 0}}, {0, 0, 0}), InvalidDeltas);
}

TEST(DecodeAabb, UndoesQuarterTurnsOfAxisAlignedBoxes) {
  std::mt19937_64 rng(5);
  for (int n = 0; n < 2000; ++n) {
    const OrientedBox b = random_box(rng, false);
    const Transform t{n % 4, random_point(rng, 0.5)};
    const OrientedBox moved = transform_box(b, t);
    const Point3 a = moved.center + random_point(rng, 0.2);
    const OrientedBox r = decode_aabb(encode(moved, a), a, 0);
    const OrientedBox expected = to_axis_aligned(moved);
    ASSERT_EQ(r.yaw, 0.0);
    ASSERT_LT(norm(r.center - expected.center), 1e-9);
    ASSERT_LT(norm(r.dims - expected.dims), 1e-9);
  }
}

TEST(TransformDeltas, QuarterTurnExample) {
  const BoxDeltas d{{0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.1, -0.3}};
  const BoxDeltas r = transform_deltas(d, 1);
  expect_deltas_near(r, BoxDeltas{{0.2, 0.4, 0.5, 0.3, 0.6, 0.4, -0.1, 0.3}}, 1e-15);
}

TEST(TransformDeltas, ZeroTurnsIsIdentity) {
  const BoxDeltas d{{0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.1, -0.3}};
  EXPECT_EQ(transform_deltas(d, 0), d);
}

TEST(TransformDeltas, HalfTurnSwapsOpposingFaces) {
  const BoxDeltas d{{0.4, 0.2, 0.5, 0.3, 0.6, 0.4, 0.1, -0.3}};
  const BoxDeltas r = transform_deltas(d, 2);
  EXPECT_DOUBLE_EQ(r[0], 0.2);
  EXPECT_DOUBLE_EQ(r[1], 0.4);
  EXPECT_DOUBLE_EQ(r[2], 0.3);
  EXPECT_DOUBLE_EQ(r[3], 0.5);
  EXPECT_EQ(r[6], 0.1);
  EXPECT_EQ(r[7], -0.3);
}

TEST(TransformDeltas, PreservesExtentSums) {
  std::mt19937_64 rng(6);
  for (int n = 0; n < 1000; ++n) {
    const BoxDeltas d = encode(random_box(rng), random_point(rng, 5.0));
    for (int k = 0; k < 4; ++k) {
      const BoxDeltas r = transform_deltas(d, k);
      ASSERT_NEAR(r[0] + r[1], d[0] + d[1], 1e-12);
      ASSERT_NEAR(r[2] + r[3], d[2] + d[3], 1e-12);
    }
  }
}

TEST(TransformDeltas, Composition) {
  std::mt19937_64 rng(7);
  for (int n = 0; n < 1000; ++n) {
    const BoxDeltas d = encode(random_box(rng), random_point(rng, 5.0));
    for (int k1 = 0; k1 < 4; ++k1) {
      for (int k2 = 0; k2 < 4; ++k2) {
        const BoxDeltas lhs = transform_deltas(transform_deltas(d, k2), k1);
        const BoxDeltas rhs = transform_deltas(d, (k1 + k2) % 4);
        for (std::size_t i = 0; i < 8; ++i) ASSERT_NEAR(lhs[i], rhs[i], 1e-12);
      }
    }
  }
}

TEST(TransformDeltas, RejectsInvalidTurns) {
  EXPECT_THROW(transform_deltas(BoxDeltas{}, 4), InvalidInput);
}

TEST(TransformDeltas, MatchesEncodingOfTransformedBox) {
  std::mt19937_64 rng(8);
  for (int n = 0; n < 10000; ++n) {
    const OrientedBox b = random_box(rng);
    const Point3 a = b.center + random_point(rng, 1.0);
    for (int k = 0; k < 4; ++k) {
      const BoxDeltas lhs = transform_deltas(encode(b, a), k);
      const BoxDeltas rhs = encode(transform_box(b, Transform{k, {}}), rotate_point(a, k));
      for (std::size_t i = 0; i < 8; ++i) ASSERT_NEAR(lhs[i], rhs[i], 1e-9) << "k " << k << " component " << i;
    }
  }
}

TEST(TransformBox, QuarterTurnExample) {
  OrientedBox b = example_box();
  const OrientedBox r = transform_box(b, Transform{1, {}});
  EXPECT_EQ(r.center, (Point3{-2.0, 1.0, 0.5}));
  EXPECT_DOUBLE_EQ(r.yaw, -0.5 * std::numbers::pi);
  EXPECT_EQ(r.dims, b.dims);
}

TEST(TransformBox, IdentityLeavesBox) {
  const OrientedBox b = example_box();
  EXPECT_EQ(transform_box(b, Transform::identity()), b);
}

TEST(TransformBox, PreservesVolume) {
  std::mt19937_64 rng(9);
  for (int n = 0; n < 1000; ++n) {
    const OrientedBox b = random_box(rng);
    const OrientedBox r = transform_box(b, dqs3d::testing::random_transform(rng));
    ASSERT_EQ(r.volume(), b.volume());
    ASSERT_GE(r.yaw, -std::numbers::pi);
    ASSERT_LT(r.yaw, std::numbers::pi);
  }
}

TEST(NormalizeYaw, HalfOpenRange) {
  EXPECT_DOUBLE_EQ(normalize_yaw(std::numbers::pi), -std::numbers::pi);
  EXPECT_DOUBLE_EQ(normalize_yaw(-std::numbers::pi), -std::numbers::pi);
  EXPECT_NEAR(normalize_yaw(2.5 * std::numbers::pi), 0.5 * std::numbers::pi, 1e-12);
  EXPECT_NEAR(normalize_yaw(-0.75 * std::numbers::pi), -0.75 * std::numbers::pi, 1e-15);
}

TEST(AabbIou, IdenticalBoxes) {
  const OrientedBox b = example_box();
  EXPECT_EQ(aabb_iou(b, b), 1.0);
}

TEST(AabbIou, DisjointBoxes) {
  OrientedBox a = example_box();
  OrientedBox b = a;
  b.center.x += 5.0;
  EXPECT_EQ(aabb_iou(a, b), 0.0);
}

TEST(AabbIou, HalfOverlappingUnitCubes) {
  OrientedBox a;
  OrientedBox b;
  b.center = {0.5, 0, 0};
  EXPECT_NEAR(aabb_iou(a, b), 1.0 / 3.0, 1e-15);
}

TEST(AabbIou, Symmetric) {
  std::mt19937_64 rng(10);
  for (int n = 0; n < 1000; ++n) {
    OrientedBox a = random_box(rng, false);
    OrientedBox b = a;
    b.center = b.center + random_point(rng, 1.0);
    b.dims = b.dims * 1.3;
    const double ab = aabb_iou(a, b);
    ASSERT_EQ(ab, aabb_iou(b, a));
    ASSERT_GE(ab, 0.0);
    ASSERT_LT(ab, 1.0);
  }
}

TEST(AabbIou, RejectsYawedBoxes) {
  OrientedBox a;
  OrientedBox b;
  b.yaw = 0.3;
  EXPECT_THROW(aabb_iou(a, b), Unsupported);
}

TEST(Contains, YawAwareAndBoundaryInclusive) {
  OrientedBox b;
  b.dims = {2.0, 1.0, 1.0};
  EXPECT_TRUE(contains(b, {1.0, 0.5, 0.5}));
  EXPECT_FALSE(contains(b, {1.01, 0.0, 0.0}));
  b.yaw = 0.5 * std::numbers::pi;
  EXPECT_TRUE(contains(b, {0.0, 0.99, 0.0}));
  EXPECT_FALSE(contains(b, {0.99, 0.0, 0.0}));
}

TEST(ToAxisAligned, RejectsOddAngles) {
  OrientedBox b;
  b.yaw = 0.4;
  EXPECT_THROW(to_axis_aligned(b), Unsupported);
}
