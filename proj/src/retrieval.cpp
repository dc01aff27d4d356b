// SPDX-License-Identifier: Apache-2.0

#include "tapct/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tapct {

namespace {

Extent3 cell_coords(const EmbeddingField& f, std::int64_t cell) {
  const auto yx = static_cast<std::int64_t>(f.grid.y) * f.grid.x;
  return {static_cast<int>(cell / yx), static_cast<int>((cell % yx) / f.grid.x),
          static_cast<int>(cell % f.grid.x)};
}

}  // namespace

RowVec<double> lesion_query(const EmbeddingField& field, const LabelMap& mask) {
  field.validate();
  if (!(mask.shape() == field.volume_shape)) {
    throw ValidationError("lesion mask " + to_string(mask.shape()) + " does not match volume " +
                          to_string(field.volume_shape));
  }
  std::vector<char> hit(static_cast<std::size_t>(field.cells()), 0);
  const Extent3 s = mask.shape();
  for (int z = 0; z < s.z; ++z)
    for (int y = 0; y < s.y; ++y)
      for (int x = 0; x < s.x; ++x) {
        if (mask.labels(z, y, x) == 0) continue;
        const std::int64_t cell =
            (static_cast<std::int64_t>(z / field.patch.z) * field.grid.y + y / field.patch.y) * field.grid.x +
            x / field.patch.x;
        hit[static_cast<std::size_t>(cell)] = 1;
      }
  RowVec<double> q = RowVec<double>::Zero(field.dim);
  int n = 0;
  for (std::size_t c = 0; c < hit.size(); ++c) {
    if (!hit[c]) continue;
    q += field.values.row(static_cast<Eigen::Index>(c)).cast<double>();
    ++n;
  }
  if (n == 0) throw ValidationError("empty lesion footprint: mask has no nonzero voxels");
  return q / n;
}

std::vector<RetrievalMatch> retrieve_query(const RowVec<double>& query, const EmbeddingField& field, int k) {
  field.validate();
  if (k < 1) throw ValidationError("k must be >= 1");
  if (query.size() != field.dim) throw ValidationError("query dim does not match the embedding field");
  const double qn = query.squaredNorm();
  std::vector<double> score(static_cast<std::size_t>(field.cells()));
  for (Eigen::Index c = 0; c < field.values.rows(); ++c) {
    const RowVec<double> b = field.values.row(c).cast<double>();
    const double denom = std::sqrt(qn * b.squaredNorm());
    score[static_cast<std::size_t>(c)] = denom > 0.0 ? query.dot(b) / denom : 0.0;
  }
  std::vector<std::int64_t> order(score.size());
  std::iota(order.begin(), order.end(), std::int64_t{0});
  const auto top = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  std::vector<RetrievalMatch> out;
  for (std::size_t r = 0; r < top; ++r) {
    RetrievalMatch m;
    m.rank = static_cast<int>(r) + 1;
    m.cell = order[r];
    m.cell_index = cell_coords(field, m.cell);
    for (int a = 0; a < 3; ++a) {
      m.voxel[static_cast<std::size_t>(a)] = m.cell_index[a] * field.patch[a] + field.patch[a] / 2.0;
    }
    m.score = score[static_cast<std::size_t>(m.cell)];
    out.push_back(m);
  }
  return out;
}

std::vector<RetrievalMatch> retrieve(const EmbeddingField& field_a, const LabelMap& lesion_mask,
                                     const EmbeddingField& field_b, int k) {
  if (field_a.dim != field_b.dim) throw ValidationError("embedding fields have different dims");
  return retrieve_query(lesion_query(field_a, lesion_mask), field_b, k);
}

LabelMap match_overlay(const EmbeddingField& field, const std::vector<RetrievalMatch>& matches) {
  LabelMap out;
  out.labels = Grid3<std::uint16_t>(field.volume_shape, 0);
  const Extent3 s = field.volume_shape;
  for (const auto& m : matches) {
    const Extent3 c = m.cell_index;
    for (int z = c.z * field.patch.z; z < std::min(s.z, (c.z + 1) * field.patch.z); ++z)
      for (int y = c.y * field.patch.y; y < std::min(s.y, (c.y + 1) * field.patch.y); ++y)
        for (int x = c.x * field.patch.x; x < std::min(s.x, (c.x + 1) * field.patch.x); ++x)
          out.labels(z, y, x) = static_cast<std::uint16_t>(m.rank);
  }
  return out;
}

}  // namespace tapct
