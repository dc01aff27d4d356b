// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint archive:
//
//   8 bytes   magic "TAPCKPT1"
//   8 bytes   manifest length (u64 little-endian)
//   N bytes   JSON manifest
//   ...       raw little-endian arrays at the offsets listed in the manifest
//
// The manifest echoes the resolved configuration, the iteration, the seed
// from which every random stream is derived, normalization statistics and
// monitor state, plus one {name, dtype, shape, offset, bytes} entry per array.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapct/trainer.hpp"

namespace tapct {

struct ArchiveArray {
  std::string name;
  std::string dtype;  // "f32le" or "f64le"
  std::vector<std::int64_t> shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  [[nodiscard]] std::vector<T> as() const;
};

struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<ArchiveArray> arrays;

  [[nodiscard]] const ArchiveArray& get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
};

template <typename T>
ArchiveArray make_array(const std::string& name, std::vector<std::int64_t> shape,
                        std::span<const T> values);

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Parameter groups stored per layout entry as "<group>/<parameter name>".
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg,
                     const ParamLayout& layout, const TrainState<T>& state);

/// Restores a state saved with the same layout and precision.
template <typename T>
TrainState<T> load_checkpoint_state(const Archive& archive, const ParamLayout& layout);

TrainConfig checkpoint_config(const Archive& archive);

/// Frozen backbone used for feature extraction (float precision).
class FrozenBackbone {
 public:
  FrozenBackbone(const ViTConfig& vit, ParamVec<float> params, const NormStats& norm,
                 Extent3 window);

  [[nodiscard]] const ViTConfig& config() const { return net_->config(); }
  [[nodiscard]] const NormStats& norm() const { return norm_; }
  /// Pretraining global-view shape; the natural sliding-window size.
  [[nodiscard]] Extent3 window() const { return window_; }
  [[nodiscard]] std::span<const float> params() const { return params_; }

  EncoderOutput<float> encode(const Grid3<float>& normalized_window) const;

 private:
  ParamLayout layout_;
  std::unique_ptr<VisionTransformer<float>> net_;
  ParamVec<float> params_;
  NormStats norm_;
  Extent3 window_;
};

/// Teacher (default) or student backbone of a checkpoint.
FrozenBackbone load_backbone(const std::filesystem::path& path, bool teacher = true);
/// Randomly initialized backbone with the same construction as pretraining.
FrozenBackbone random_backbone(const TrainConfig& cfg, const NormStats& norm);

}  // namespace tapct
