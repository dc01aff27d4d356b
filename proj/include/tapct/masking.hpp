// SPDX-License-Identifier: Apache-2.0
//
// 3D block masking of patch-token grids for the student's global views.

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tapct/common.hpp"

namespace tapct {

struct PatchGrid {
  Extent3 tokens;
  Extent3 patch;

  [[nodiscard]] std::int64_t count() const { return tokens.count(); }
  void validate() const;
  /// Token grid of a view; throws if the view is not divisible by the patch.
  static PatchGrid of(Extent3 view, Extent3 patch);
};

/// Axis-aligned token block [z0, z0+bz) x [y0, y0+by) x [x0, x0+bx).
struct MaskBlock {
  int z0, y0, x0;
  int bz, by, bx;
  [[nodiscard]] std::int64_t count() const { return static_cast<std::int64_t>(bz) * by * bx; }
};

struct MaskPlan {
  Grid3<std::uint8_t> mask;
  double target_ratio = 0.0;
  std::int64_t target_count = 0;
  std::vector<MaskBlock> blocks;

  [[nodiscard]] std::int64_t masked_count() const;
  [[nodiscard]] bool empty() const { return masked_count() == 0; }
  /// Flattened indices (z-major) of masked tokens in ascending order.
  [[nodiscard]] std::vector<int> masked_indices() const;
};

struct MaskSpec {
  double prob = 0.5;
  std::pair<double, double> ratio{0.1, 0.5};
  /// Range for both the height/width and the height/depth block aspect.
  std::pair<double, double> aspect{0.75, 1.333};
  int min_block = 4;
  int max_attempts = 40;

  void validate() const;
};

/// With probability 1 - prob returns an empty plan; otherwise draws a target
/// ratio and fills blocks until the target count is reached.
MaskPlan plan_masks(const PatchGrid& grid, const MaskSpec& spec, Rng& rng);

/// Masked branch with a fixed target ratio.
MaskPlan plan_masks_with_ratio(const PatchGrid& grid, const MaskSpec& spec, double ratio, Rng& rng);

/// Block extents (bz, by, bx) for a token area and aspects a1 = by/bx,
/// a2 = by/bz, clamped to the grid so that bz*by*bx approximates `area`.
Extent3 block_extents(double area, double a1, double a2, Extent3 grid);

}  // namespace tapct
