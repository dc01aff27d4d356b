// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "tapct/masking.hpp"

using namespace tapct;

namespace {

bool covered_by_blocks(const MaskPlan& p) {
  const Extent3 g = p.mask.shape();
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        if (!p.mask(z, y, x)) continue;
        bool in = false;
        for (const auto& b : p.blocks) {
          in = in || (z >= b.z0 && z < b.z0 + b.bz && y >= b.y0 && y < b.y0 + b.by && x >= b.x0 && x < b.x0 + b.bx);
        }
        if (!in) return false;
      }
  return true;
}

}  // namespace

TEST(PatchGrid, CountsTokens) {
  const PatchGrid g = PatchGrid::of({12, 224, 224}, {4, 8, 8});
  EXPECT_EQ(g.tokens, (Extent3{3, 28, 28}));
  EXPECT_EQ(g.count(), 2352);
  EXPECT_THROW(PatchGrid::of({10, 224, 224}, {4, 8, 8}), ValidationError);
}

TEST(Masking, ProbabilityZeroIsEmpty) {
  MaskSpec s;
  s.prob = 0.0;
  Rng r(1);
  for (int t = 0; t < 50; ++t) {
    const MaskPlan p = plan_masks(PatchGrid::of({12, 224, 224}, {4, 8, 8}), s, r);
    EXPECT_TRUE(p.empty());
    EXPECT_EQ(p.masked_count(), 0);
  }
}

TEST(Masking, HalfRatioTargetOnFullGrid) {
  Rng r(2);
  const PatchGrid g = PatchGrid::of({12, 224, 224}, {4, 8, 8});
  const MaskPlan p = plan_masks_with_ratio(g, MaskSpec{}, 0.5, r);
  EXPECT_EQ(p.target_count, 1176);
  std::int64_t sum = 0;
  for (auto m : p.mask.values()) sum += m;
  EXPECT_EQ(sum, p.masked_count());
  EXPECT_GE(p.masked_count(), 1176);
  std::int64_t last = p.blocks.back().count();
  EXPECT_LE(p.masked_count(), 1176 + last);
  EXPECT_TRUE(covered_by_blocks(p));
}

TEST(Masking, TwoByTwoGridMasksOneContiguousPair) {
  const PatchGrid g{{1, 2, 2}, {1, 1, 1}};
  Rng r(3);
  for (int t = 0; t < 200; ++t) {
    const MaskPlan p = plan_masks_with_ratio(g, MaskSpec{}, 0.5, r);
    ASSERT_EQ(p.masked_count(), 2);
    ASSERT_EQ(p.blocks.size(), 1u);
    const auto& b = p.blocks[0];
    EXPECT_EQ(b.count(), 2);
    EXPECT_TRUE((b.by == 1 && b.bx == 2) || (b.by == 2 && b.bx == 1));
  }
}

TEST(Masking, FuzzedRatioBoundsAndCoverage) {
  MaskSpec s;
  Rng r(4);
  const PatchGrid g = PatchGrid::of({8, 64, 64}, {4, 8, 8});
  int empties = 0;
  for (int t = 0; t < 1000; ++t) {
    const MaskPlan p = plan_masks(g, s, r);
    if (p.empty()) {
      ++empties;
      continue;
    }
    const double frac = static_cast<double>(p.masked_count()) / static_cast<double>(g.count());
    EXPECT_GE(frac, s.ratio.first * 0.9);
    EXPECT_LE(p.masked_count(), p.target_count + p.blocks.back().count());
    EXPECT_TRUE(covered_by_blocks(p));
  }
  EXPECT_GT(empties, 380);
  EXPECT_LT(empties, 620);
}

TEST(Masking, Deterministic) {
  const PatchGrid g = PatchGrid::of({12, 224, 224}, {4, 8, 8});
  Rng a(9), b(9);
  for (int t = 0; t < 20; ++t) EXPECT_EQ(plan_masks(g, MaskSpec{}, a).mask, plan_masks(g, MaskSpec{}, b).mask);
}

TEST(Masking, BlockExtentsApproximateArea) {
  const Extent3 b = block_extents(64.0, 1.0, 1.0, {28, 28, 28});
  EXPECT_EQ(b, (Extent3{4, 4, 4}));
  const Extent3 c = block_extents(100.0, 1.0, 1.0, {1, 28, 28});
  EXPECT_EQ(c.z, 1);
  EXPECT_EQ(c.y * c.x, 100);
}
