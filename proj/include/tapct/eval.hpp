// SPDX-License-Identifier: Apache-2.0
//
// Frozen-feature evaluation: sliding-window embedding fields, the linear
// segmentation probe, fixed-extent lesion crops and the gated-attention MIL
// classifier.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tapct/checkpoint.hpp"
#include "tapct/common.hpp"
#include "tapct/volcore.hpp"

namespace tapct {

/// Patch embeddings stitched over a whole volume. The volume is padded at
/// the far end of each axis (edge replication) to a multiple of the patch;
/// `volume_shape` keeps the unpadded extent.
struct EmbeddingField {
  Extent3 grid;
  Extent3 patch;
  int dim = 0;
  Extent3 volume_shape;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string id;
  /// cells x dim, z-major cell order.
  Mat<float> values;
  std::vector<int> coverage;
  /// One CLS embedding per window (windows x dim); may be empty.
  Mat<float> cls;

  [[nodiscard]] std::int64_t cells() const { return grid.count(); }
  void validate() const;
};

struct WindowEncoding {
  Mat<float> patches;
  Extent3 grid;
  RowVec<float> cls;
};

/// Maps a normalized window to its patch tokens and CLS embedding.
using FrozenEncoder = std::function<WindowEncoding(const Grid3<float>&)>;

FrozenEncoder make_encoder(const FrozenBackbone& backbone);

/// Window start offsets along one axis: 0, stride, ... and a final window
/// clamped to end at `extent`.
std::vector<int> window_starts(int extent, int window, int stride);

/// `v` must already be normalized. Windows must be divisible by `patch` and
/// fit the padded volume; strides must be positive multiples of the patch.
EmbeddingField extract_embeddings(const FrozenEncoder& encoder, const Volume& v, Extent3 window,
                                  Extent3 stride, Extent3 patch, bool keep_cls = true);

/// Writes `<stem>.emb.json/.raw` and, when present, `<stem>.cls.json/.raw`.
void save_field(const EmbeddingField& field, const std::filesystem::path& stem);
EmbeddingField load_field(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Linear segmentation probe

struct SegHead {
  Mat<double> weight;  // n_classes x dim
  RowVec<double> bias;
  [[nodiscard]] int n_classes() const { return static_cast<int>(weight.rows()); }
};

struct SegTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  int accum = 4;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// Cell logits upsampled to voxels with half-voxel-center trilinear
/// interpolation, cropped to the unpadded volume: voxels x n_classes.
Mat<double> seg_voxel_logits(const SegHead& head, const EmbeddingField& field);

LabelMap predict_seg(const SegHead& head, const EmbeddingField& field);

/// Voxel-wise cross-entropy, AdamW with cosine decay, batch of one volume,
/// gradients accumulated over `accum` volumes. Returns the fitted head;
/// `final_loss` receives the mean loss of the last epoch.
SegHead train_seg(const std::vector<EmbeddingField>& fields, const std::vector<LabelMap>& labels,
                  int n_classes, const SegTrainConfig& cfg, double* final_loss = nullptr);

// ---------------------------------------------------------------------------
// Lesion crops

/// Crop of round(extent_mm / spacing) voxels per axis centered on
/// `center_mm` (voxel coordinate = mm / spacing); out-of-bounds voxels
/// replicate the nearest edge.
Volume lesion_crop(const Volume& v, const std::array<double, 3>& center_mm, double extent_mm);

// ---------------------------------------------------------------------------
// Gated-attention multiple-instance classifier

struct AbmilHead {
  Mat<double> v, u;       // hidden x dim
  RowVec<double> bv, bu;  // hidden
  RowVec<double> w;       // hidden
  double bw = 0.0;
  Mat<double> c;          // n_out x dim
  RowVec<double> bc;      // n_out

  [[nodiscard]] int dim() const { return static_cast<int>(v.cols()); }
  [[nodiscard]] int n_out() const { return static_cast<int>(c.rows()); }
};

AbmilHead init_abmil(int dim, int hidden, int n_out, std::uint64_t seed);

struct AbmilOutput {
  RowVec<double> logits;
  Vec<double> attention;
  RowVec<double> pooled;
};

AbmilOutput abmil_forward(const AbmilHead& head, const Mat<double>& bag);

struct ClsTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  int accum = 16;
  int hidden = 128;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

/// Binary cross-entropy per label. `labels` is bags x n_out with 0/1 entries.
/// Labels constant over the training set are reported through `warnings`.
AbmilHead train_cls(const std::vector<Mat<double>>& bags, const Mat<int>& labels,
                    const ClsTrainConfig& cfg, std::vector<std::string>* warnings = nullptr);

}  // namespace tapct
