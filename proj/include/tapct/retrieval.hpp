// SPDX-License-Identifier: Apache-2.0
//
// Lesion-to-scan retrieval by cosine similarity of patch embeddings.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tapct/eval.hpp"

namespace tapct {

struct RetrievalMatch {
  int rank = 0;
  std::int64_t cell = 0;
  Extent3 cell_index;
  /// Voxel coordinate of the cell center: cell * patch + patch / 2.
  std::array<double, 3> voxel{};
  double score = 0.0;
};

/// Mean embedding of every cell of `field` whose voxel footprint contains a
/// nonzero mask voxel. Throws ValidationError if there is none.
RowVec<double> lesion_query(const EmbeddingField& field, const LabelMap& mask);

/// Top-k cells of `field` by cosine similarity; ties keep cell order.
std::vector<RetrievalMatch> retrieve_query(const RowVec<double>& query, const EmbeddingField& field,
                                           int k);

std::vector<RetrievalMatch> retrieve(const EmbeddingField& field_a, const LabelMap& lesion_mask,
                                     const EmbeddingField& field_b, int k);

/// Label map over field's unpadded volume with each match footprint set to its rank.
LabelMap match_overlay(const EmbeddingField& field, const std::vector<RetrievalMatch>& matches);

}  // namespace tapct
