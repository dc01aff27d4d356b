// SPDX-License-Identifier: Apache-2.0
//
// Volumes, label maps, the portable two-file container, intensity
// normalization and the synthetic phantom generator.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tapct/common.hpp"

namespace tapct {

/// Millimetres per voxel along (z, y, x).
using Spacing = std::array<double, 3>;

struct Volume {
  Grid3<float> data;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string id;

  [[nodiscard]] const Extent3& shape() const { return data.shape(); }
  /// Throws ValidationError on empty extents, non-positive spacing or non-finite data.
  void validate() const;
};

/// Dataset-wide intensity statistics used to clip and standardize volumes.
struct NormStats {
  double mean = 0.0;
  double std = 1.0;
  double clip_min = -1.0e30;
  double clip_max = 1.0e30;

  void validate() const;
  /// Statistics of the large CT pretraining corpus.
  static NormStats ct_reference() { return {-86.8086, 322.6347, -1008.0, 822.0}; }
};

struct LabelMap {
  Grid3<std::uint16_t> labels;
  std::vector<std::string> class_names;
  std::optional<std::map<int, int>> remap;

  [[nodiscard]] const Extent3& shape() const { return labels.shape(); }
  /// Class count after remap; falls back to max label + 1 without names.
  [[nodiscard]] int num_classes() const;
  /// Returns a copy with `remap` applied to every voxel and cleared.
  [[nodiscard]] LabelMap applied() const;
  void validate() const;
};

/// Reads a TotalSegmentator-style merge file: JSON object {"original_id": merged_id}.
std::map<int, int> load_label_remap(const std::filesystem::path& path);

/// `path` names either `<name>`, `<name>.json` or `<name>.raw`; both files must exist.
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path);
void save_labels(const LabelMap& labels, const std::filesystem::path& path);

/// Reads only the sidecar's "dtype" field.
std::string sidecar_dtype(const std::filesystem::path& path);
/// Sorted sidecar stems in `dir` whose dtype matches.
std::vector<std::filesystem::path> list_containers(const std::filesystem::path& dir,
                                                   const std::string& dtype);

/// (clamp(x, clip_min, clip_max) - mean) / std per voxel.
Volume normalize(const Volume& v, const NormStats& s);

/// Mean, population std and 0.5/99.5 percentiles of voxels with intensity > fg_threshold.
NormStats compute_foreground_stats(std::span<const Volume> volumes, double fg_threshold);

/// Linear interpolation between closest ranks; `sorted` must be ascending.
double percentile_sorted(std::span<const float> sorted, double pct);

struct Phantom {
  Volume volume;
  LabelMap labels;
};

/// Deterministic CT-like phantom: smooth soft-tissue background with n_blobs
/// ellipsoidal organs, class k occupying its own intensity band.
Phantom synth_volume(std::uint64_t seed, Extent3 extents, int n_blobs);

/// FNV-1a over the raw little-endian bytes of the intensities.
std::uint64_t checksum(const Volume& v);

}  // namespace tapct
