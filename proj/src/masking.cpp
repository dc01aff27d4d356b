// SPDX-License-Identifier: Apache-2.0

#include "tapct/masking.hpp"

#include <algorithm>
#include <cmath>

namespace tapct {

void PatchGrid::validate() const {
  if (!tokens.positive() || !patch.positive()) {
    throw ValidationError("patch grid counts and patch sizes must be >= 1");
  }
}

PatchGrid PatchGrid::of(Extent3 view, Extent3 patch) {
  if (!patch.positive() || !view.positive()) throw ValidationError("extents must be >= 1");
  if (view.z % patch.z || view.y % patch.y || view.x % patch.x) {
    throw ValidationError("view " + to_string(view) + " not divisible by patch " + to_string(patch));
  }
  return {{view.z / patch.z, view.y / patch.y, view.x / patch.x}, patch};
}

void MaskSpec::validate() const {
  if (!(prob >= 0.0 && prob <= 1.0)) throw ValidationError("mask.prob must be in [0,1]");
  if (!(ratio.first >= 0.0 && ratio.first <= ratio.second && ratio.second <= 1.0)) {
    throw ValidationError("mask.ratio must satisfy 0 <= min <= max <= 1");
  }
  if (!(aspect.first > 0.0 && aspect.first <= aspect.second)) {
    throw ValidationError("mask.aspect must satisfy 0 < min <= max");
  }
  if (min_block < 1 || max_attempts < 1) throw ValidationError("mask block settings must be >= 1");
}

std::int64_t MaskPlan::masked_count() const {
  std::int64_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  return n;
}

std::vector<int> MaskPlan::masked_indices() const {
  std::vector<int> out;
  const auto& v = mask.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) out.push_back(static_cast<int>(i));
  return out;
}

Extent3 block_extents(double area, double a1, double a2, Extent3 grid) {
  // by/bx = a1, by/bz = a2, bz*by*bx = area  =>  by = cbrt(area*a1*a2).
  const double by_real = std::cbrt(area * a1 * a2);
  const int bz = std::clamp(static_cast<int>(std::lround(by_real / a2)), 1, grid.z);
  // Re-solve in-plane so clamping along depth does not shrink the block.
  const double plane = area / bz;
  const int by = std::clamp(static_cast<int>(std::lround(std::sqrt(plane * a1))), 1, grid.y);
  const int bx = std::clamp(static_cast<int>(std::lround(plane / by)), 1, grid.x);
  return {bz, by, bx};
}

MaskPlan plan_masks_with_ratio(const PatchGrid& grid, const MaskSpec& spec, double ratio, Rng& rng) {
  grid.validate();
  spec.validate();
  MaskPlan plan;
  plan.mask = Grid3<std::uint8_t>(grid.tokens, 0);
  plan.target_ratio = ratio;
  plan.target_count = std::llround(ratio * static_cast<double>(grid.count()));
  if (plan.target_count <= 0) return plan;

  const Extent3 g = grid.tokens;
  std::int64_t masked = 0;
  for (int attempt = 0; attempt < spec.max_attempts && masked < plan.target_count; ++attempt) {
    const auto remaining = static_cast<double>(plan.target_count - masked);
    const double lo = std::min(static_cast<double>(spec.min_block), remaining);
    const double area = rng.uniform(lo, remaining);
    const double a1 = log_uniform(rng, spec.aspect.first, spec.aspect.second);
    const double a2 = log_uniform(rng, spec.aspect.first, spec.aspect.second);
    const Extent3 b = block_extents(area, a1, a2, g);
    MaskBlock blk{static_cast<int>(rng.uniform_int(0, g.z - b.z)),
                  static_cast<int>(rng.uniform_int(0, g.y - b.y)),
                  static_cast<int>(rng.uniform_int(0, g.x - b.x)), b.z, b.y, b.x};
    std::int64_t added = 0;
    for (int z = blk.z0; z < blk.z0 + blk.bz; ++z)
      for (int y = blk.y0; y < blk.y0 + blk.by; ++y)
        for (int x = blk.x0; x < blk.x0 + blk.bx; ++x) {
          auto& m = plan.mask(z, y, x);
          added += m == 0;
          m = 1;
        }
    masked += added;
    plan.blocks.push_back(blk);
  }
  return plan;
}

MaskPlan plan_masks(const PatchGrid& grid, const MaskSpec& spec, Rng& rng) {
  grid.validate();
  spec.validate();
  const bool masked = rng.bernoulli(spec.prob);
  const double ratio = rng.uniform(spec.ratio.first, spec.ratio.second);
  if (!masked) {
    MaskPlan empty;
    empty.mask = Grid3<std::uint8_t>(grid.tokens, 0);
    return empty;
  }
  return plan_masks_with_ratio(grid, spec, ratio, rng);
}

}  // namespace tapct
