// SPDX-License-Identifier: Apache-2.0
//
// Multi-crop view generation. A crop picks an axial area and aspect ratio,
// extends it through a fixed number of slices, and resizes each slice to the
// target in-plane size; depth is never resampled.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tapct/common.hpp"
#include "tapct/volcore.hpp"

namespace tapct {

enum class CropKind { global, local };

struct CropSpec {
  std::pair<double, double> scale{0.32, 1.0};
  std::pair<double, double> aspect{3.0 / 4.0, 4.0 / 3.0};
  int out_h = 224;
  int out_w = 224;
  int depth = 12;
  CropKind kind = CropKind::global;

  void validate() const;
  [[nodiscard]] Extent3 view_shape() const { return {depth, out_h, out_w}; }
};

struct CropBox {
  int z0 = 0, y0 = 0, x0 = 0;
  int dz = 0, dy = 0, dx = 0;
  /// Set when all attempts failed and the largest valid center crop was used.
  bool fallback = false;
  /// Set when the source has fewer slices than `dz`; missing slices replicate the edge.
  bool depth_padded = false;

  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct View {
  Grid3<float> data;
  CropBox box;
  CropKind kind = CropKind::global;
  std::string source_id;
};

struct MultiCrop {
  std::vector<View> globals;
  std::vector<View> locals;
};

/// Intensity augmentation parameters; probabilities are per view role.
struct AugSpec {
  std::pair<double, double> gamma{0.7, 1.5};
  double gamma_p_global = 0.8;
  double gamma_p_local = 0.5;
  std::pair<double, double> blur_sigma{0.1, 2.0};
  /// Blur probability for the first and second global view, and for locals.
  double blur_p_global0 = 1.0;
  double blur_p_global1 = 0.1;
  double blur_p_local = 0.5;
};

/// Number of attempts before falling back to a center crop.
inline constexpr int kCropAttempts = 10;
/// Relative tolerance on realized area fraction and aspect after rounding.
inline constexpr double kCropTolerance = 0.05;
/// Engine draws consumed by sample_crop_box, independent of outcome.
inline constexpr int kCropBoxDraws = 2 * kCropAttempts + 3;

/// Samples a box: area fraction ~ U[scale], aspect (dy/dx) log-uniform in
/// `aspect`, up to kCropAttempts tries, then a centered fallback. Always
/// consumes kCropBoxDraws draws.
CropBox sample_crop_box(const CropSpec& spec, Extent3 src, Rng& rng);

/// Box for a fixed area fraction and aspect; only the origin is random
/// (three draws). Falls back to a center crop when the size does not fit.
CropBox place_crop_box(const CropSpec& spec, Extent3 src, double area_fraction, double aspect,
                       Rng& rng);

/// Per-slice bilinear resize (half-pixel centers) of the boxed region to (H, W).
View resize_crop(const Volume& v, const CropBox& box, int out_h, int out_w);

/// Gamma on the view's own [min, max] range; constant views pass through.
View apply_gamma(const View& view, double gamma);
/// With probability p, apply_gamma with gamma log-uniform in range. Two draws.
View random_gamma(const View& view, std::pair<double, double> gamma_range, double p, Rng& rng);

/// Normalized 1D Gaussian taps, radius ceil(2 sigma).
std::vector<double> gaussian_kernel(double sigma);
/// Separable in-plane Gaussian blur with edge replication; depth untouched.
View apply_blur(const View& view, double sigma);
/// With probability p, apply_blur with sigma ~ U[range]. Two draws.
View gaussian_blur(const View& view, std::pair<double, double> sigma_range, double p, Rng& rng);

/// Two globals then n_local locals. Each view is generated from its own
/// stream seeded by one draw of `rng`, so `rng` advances by 2 + n_local.
MultiCrop make_multicrop(const Volume& v, const CropSpec& global, const CropSpec& local,
                         int n_local, const AugSpec& aug, Rng& rng);

}  // namespace tapct
