// SPDX-License-Identifier: Apache-2.0
//
// Flat parameter storage. A ParamLayout names every tensor and its slice of
// one contiguous buffer, so student, teacher, gradients and optimizer
// moments are plain vectors sharing a single layout. Slices start on
// kParamAlign-element boundaries and buffers are over-aligned, so vectorized
// reductions over mapped slices do not depend on heap placement.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tapct/common.hpp"

namespace tapct {

inline constexpr std::size_t kParamAlign = 16;

template <typename T>
using ParamVec = std::vector<T, Eigen::aligned_allocator<T>>;

enum class InitKind { zeros, ones, constant, trunc_normal };

/// Slice of the flat buffer viewed as a row-major rows x cols matrix.
struct ParamRef {
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct ParamInfo {
  std::string name;
  ParamRef ref;
  /// 0 for embeddings, i + 1 for transformer block i, depth + 1 for everything after.
  int layer_id = 0;
  bool decay = true;
  InitKind init = InitKind::zeros;
  double init_value = 0.0;
};

class ParamLayout {
 public:
  ParamRef add(const std::string& name, int rows, int cols, int layer_id, bool decay,
               InitKind init, double init_value = 0.0);

  [[nodiscard]] const std::vector<ParamInfo>& entries() const { return entries_; }
  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] const ParamInfo& find(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;

  /// Number of transformer blocks used for layerwise decay.
  int num_layers = 0;

 private:
  std::vector<ParamInfo> entries_;
  std::size_t total_ = 0;
};

template <typename T>
void init_params(const ParamLayout& layout, std::span<T> params, Rng& rng);

/// Per-element learning-rate multiplier decay^(num_layers + 1 - layer_id).
template <typename T>
ParamVec<T> layerwise_lr_scale(const ParamLayout& layout, double decay);

/// Per-element weight-decay multiplier (1 or 0).
template <typename T>
ParamVec<T> weight_decay_mask(const ParamLayout& layout);

template <typename T>
Eigen::Map<const Mat<T>> cmat(std::span<const T> p, const ParamRef& r) {
  return Eigen::Map<const Mat<T>>(p.data() + r.offset, r.rows, r.cols);
}
template <typename T>
Eigen::Map<Mat<T>> gmat(std::span<T> g, const ParamRef& r) {
  return Eigen::Map<Mat<T>>(g.data() + r.offset, r.rows, r.cols);
}
template <typename T>
Eigen::Map<const RowVec<T>> crow(std::span<const T> p, const ParamRef& r) {
  return Eigen::Map<const RowVec<T>>(p.data() + r.offset, static_cast<Eigen::Index>(r.size()));
}
template <typename T>
Eigen::Map<RowVec<T>> grow(std::span<T> g, const ParamRef& r) {
  return Eigen::Map<RowVec<T>>(g.data() + r.offset, static_cast<Eigen::Index>(r.size()));
}

/// Global L2 norm accumulated in double.
template <typename T>
double l2_norm(std::span<const T> v);

}  // namespace tapct
