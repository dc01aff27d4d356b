// SPDX-License-Identifier: Apache-2.0
//
// Depth-aware Vision Transformer with a hand-written backward pass.
//
// Token layout of every encoder output: row 0 is CLS, rows 1..R are the
// register tokens, and the remaining rows are patch tokens in z-major order.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "tapct/common.hpp"
#include "tapct/masking.hpp"
#include "tapct/params.hpp"
#include "tapct/views.hpp"

namespace tapct {

struct ViTConfig {
  int embed_dim = 768;
  int depth_layers = 12;
  int heads = 12;
  Extent3 patch{4, 8, 8};
  int n_registers = 4;
  double layerscale_init = 1e-5;
  double drop_path = 0.2;
  double mlp_ratio = 4.0;
  /// Shape of the stored positional table, normally the pretraining token grid.
  Extent3 pos_grid{3, 28, 28};
  double ln_eps = 1e-6;
  double init_std = 0.02;

  void validate() const;
  [[nodiscard]] int head_dim() const { return embed_dim / heads; }
  [[nodiscard]] int mlp_hidden() const;
};

/// Backbone plus the crop geometry it was pretrained with.
struct ModelPreset {
  std::string name;
  ViTConfig vit;
  CropSpec global;
  CropSpec local;
};

/// tap-{s,b}-{2d,2.5d,3d} and the small "desk" configuration.
ModelPreset model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

/// Non-overlapping patch blocks flattened as rows (N x pz*py*px), token order
/// z-major, in-patch order (dz, dy, dx).
template <typename T>
Mat<T> extract_patches(const Grid3<float>& view, Extent3 patch);

/// Trilinear resampling of a (gz*gy*gx) x E table to a (nz*ny*nx) grid with
/// half-voxel sample centers. Equal shapes return an exact copy.
template <typename T>
Mat<T> interp_pos(const Mat<T>& table, Extent3 from, Extent3 to);

/// Adjoint of interp_pos: maps a gradient on the target grid back to the table.
template <typename T>
Mat<T> interp_pos_adjoint(const Mat<T>& grad, Extent3 from, Extent3 to);

template <typename T>
struct EncoderOutput {
  Mat<T> tokens;
  Extent3 grid;
  int n_registers = 0;

  [[nodiscard]] Eigen::Index n_patches() const { return tokens.rows() - 1 - n_registers; }
  [[nodiscard]] auto cls() const { return tokens.row(0); }
  [[nodiscard]] auto registers() const { return tokens.middleRows(1, n_registers); }
  [[nodiscard]] auto patches() const { return tokens.bottomRows(n_patches()); }
};

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T>
struct BlockCache {
  T s1 = T(1);
  T s2 = T(1);
  LnCache<T> ln1, ln2;
  Mat<T> h1, qkv, cat, attn_out;
  std::vector<Mat<T>> probs;
  Mat<T> h2, fc1, act, mlp_out;
};

template <typename T>
struct VitCache {
  Extent3 grid;
  Mat<T> patches;
  std::vector<std::uint8_t> masked;
  std::vector<BlockCache<T>> blocks;
  LnCache<T> norm;
};

template <typename T>
class VisionTransformer {
 public:
  /// Registers the backbone tensors in `layout` under `prefix`.
  VisionTransformer(const ViTConfig& cfg, ParamLayout& layout, const std::string& prefix = "backbone");

  [[nodiscard]] const ViTConfig& config() const { return cfg_; }

  /// Encodes one view. `mask` substitutes the mask embedding at masked
  /// tokens; a non-null `drop_rng` enables stochastic depth (2 draws per
  /// block); a non-null `cache` records what backward() needs.
  EncoderOutput<T> forward(const Grid3<float>& view, std::span<const T> params,
                           const MaskPlan* mask = nullptr, Rng* drop_rng = nullptr,
                           VitCache<T>* cache = nullptr) const;

  /// Accumulates parameter gradients for d(loss)/d(tokens) = grad_tokens.
  void backward(const Mat<T>& grad_tokens, const VitCache<T>& cache, std::span<const T> params,
                std::span<T> grads) const;

 private:
  struct BlockRefs {
    ParamRef norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b, ls1;
    ParamRef norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b, ls2;
  };

  void block_forward(Mat<T>& x, const BlockRefs& r, std::span<const T> p, BlockCache<T>& c,
                     bool keep) const;
  void block_backward(Mat<T>& dx, const BlockRefs& r, std::span<const T> p, std::span<T> g,
                      const BlockCache<T>& c) const;

  ViTConfig cfg_;
  ParamRef patch_w_, patch_b_, pos_, cls_, reg_, mask_token_, norm_w_, norm_b_;
  std::vector<BlockRefs> blocks_;
};

template <typename T>
void layer_norm_forward(const Mat<T>& x, Eigen::Ref<const RowVec<T>> w,
                        Eigen::Ref<const RowVec<T>> b, double eps, Mat<T>& y, LnCache<T>* cache);

/// Returns dx and accumulates dw, db.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache,
                           Eigen::Ref<const RowVec<T>> w, Eigen::Map<RowVec<T>> dw,
                           Eigen::Map<RowVec<T>> db);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

}  // namespace tapct
