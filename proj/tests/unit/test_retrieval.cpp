// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "tapct/retrieval.hpp"

using namespace tapct;

namespace {

EmbeddingField random_field(Extent3 grid, int dim, Rng& r) {
  EmbeddingField f;
  f.grid = grid;
  f.patch = {2, 4, 4};
  f.dim = dim;
  f.volume_shape = {grid.z * 2, grid.y * 4, grid.x * 4};
  f.values.resize(grid.count(), dim);
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = static_cast<float>(r.normal());
  f.coverage.assign(static_cast<std::size_t>(grid.count()), 1);
  return f;
}

LabelMap cell_mask(const EmbeddingField& f, Extent3 cell) {
  LabelMap m;
  m.labels = Grid3<std::uint16_t>(f.volume_shape, 0);
  m.labels(cell.z * f.patch.z + 1, cell.y * f.patch.y + 2, cell.x * f.patch.x + 3) = 1;
  return m;
}

}  // namespace

TEST(Retrieval, SelfRetrievalIsExact) {
  Rng r(1);
  const EmbeddingField f = random_field({2, 3, 4}, 8, r);
  const auto m = retrieve(f, cell_mask(f, {1, 2, 3}), f, 5);
  ASSERT_EQ(m.size(), 5u);
  EXPECT_EQ(m[0].cell, (1 * 3 + 2) * 4 + 3);
  EXPECT_EQ(m[0].score, 1.0);
  EXPECT_EQ(m[0].cell_index, (Extent3{1, 2, 3}));
  EXPECT_EQ(m[0].voxel, (std::array<double, 3>{3.0, 10.0, 14.0}));
  EXPECT_EQ(m[0].rank, 1);
  for (std::size_t i = 1; i < m.size(); ++i) EXPECT_LE(m[i].score, m[i - 1].score);
}

TEST(Retrieval, OrthogonalQueryTiesKeepCellOrder) {
  EmbeddingField f;
  f.grid = {1, 2, 2};
  f.patch = {1, 1, 1};
  f.dim = 2;
  f.volume_shape = {1, 2, 2};
  f.values = Mat<float>::Zero(4, 2);
  f.values.col(0).setOnes();
  f.coverage.assign(4, 1);
  RowVec<double> q(2);
  q << 0.0, 1.0;
  const auto m = retrieve_query(q, f, 4);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(m[static_cast<std::size_t>(i)].score, 0.0);
    EXPECT_EQ(m[static_cast<std::size_t>(i)].cell, i);
  }
}

TEST(Retrieval, PlantedDuplicateAndScaleInvariance) {
  Rng r(2);
  for (int t = 0; t < 20; ++t) {
    EmbeddingField a = random_field({2, 4, 4}, 16, r);
    EmbeddingField b = random_field({3, 4, 4}, 16, r);
    const Extent3 src{static_cast<int>(r.uniform_int(0, 1)), static_cast<int>(r.uniform_int(0, 3)),
                      static_cast<int>(r.uniform_int(0, 3))};
    const auto target = r.uniform_int(0, b.cells() - 1);
    const LabelMap mask = cell_mask(a, src);
    b.values.row(target) = lesion_query(a, mask).cast<float>();
    const auto m = retrieve(a, mask, b, 3);
    EXPECT_EQ(m[0].cell, target);
    const auto m2 = retrieve_query(lesion_query(a, mask) * 7.5, b, 3);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(m2[static_cast<std::size_t>(k)].cell, m[static_cast<std::size_t>(k)].cell);
  }
}

TEST(Retrieval, QueryAveragesFootprintCells) {
  Rng r(3);
  const EmbeddingField f = random_field({1, 2, 2}, 4, r);
  LabelMap m;
  m.labels = Grid3<std::uint16_t>(f.volume_shape, 0);
  m.labels(0, 0, 0) = 1;
  m.labels(1, 5, 1) = 1;
  const RowVec<double> q = lesion_query(f, m);
  const RowVec<double> expect = (f.values.row(0).cast<double>() + f.values.row(2).cast<double>()) / 2.0;
  EXPECT_LT((q - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Retrieval, EmptyFootprintRejected) {
  Rng r(4);
  const EmbeddingField f = random_field({1, 2, 2}, 4, r);
  LabelMap m;
  m.labels = Grid3<std::uint16_t>(f.volume_shape, 0);
  try {
    lesion_query(f, m);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("empty lesion footprint"), std::string::npos);
  }
}

TEST(Retrieval, OverlayMarksRanks) {
  Rng r(5);
  const EmbeddingField f = random_field({1, 2, 2}, 4, r);
  const auto m = retrieve(f, cell_mask(f, {0, 1, 0}), f, 2);
  const LabelMap o = match_overlay(f, m);
  EXPECT_EQ(o.labels(1, 5, 2), 1);
  EXPECT_EQ(o.shape(), f.volume_shape);
}
