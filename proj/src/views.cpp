// SPDX-License-Identifier: Apache-2.0

#include "tapct/views.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace tapct {

void CropSpec::validate() const {
  if (!(scale.first > 0.0 && scale.first <= scale.second && scale.second <= 1.0)) {
    throw ValidationError("crop scale must satisfy 0 < min <= max <= 1");
  }
  if (!(aspect.first > 0.0 && aspect.first <= aspect.second)) {
    throw ValidationError("crop aspect must satisfy 0 < min <= max");
  }
  if (depth < 1 || out_h < 1 || out_w < 1) throw ValidationError("crop size must be >= 1");
}

namespace {

std::pair<int, int> rounded_size(double area, double aspect) {
  const int dy = static_cast<int>(std::lround(std::sqrt(area * aspect)));
  const int dx = static_cast<int>(std::lround(std::sqrt(area / aspect)));
  return {dy, dx};
}

bool acceptable(const CropSpec& spec, Extent3 src, int dy, int dx) {
  if (dy < 1 || dx < 1 || dy > src.y || dx > src.x) return false;
  const double frac = static_cast<double>(dy) * dx / (static_cast<double>(src.y) * src.x);
  const double ratio = static_cast<double>(dy) / dx;
  return frac >= spec.scale.first * (1.0 - kCropTolerance) &&
         frac <= spec.scale.second * (1.0 + kCropTolerance) &&
         ratio >= spec.aspect.first * (1.0 - kCropTolerance) &&
         ratio <= spec.aspect.second * (1.0 + kCropTolerance);
}

// Three draws: z0, y0, x0.
CropBox finish_box(const CropSpec& spec, Extent3 src, std::optional<std::pair<int, int>> size,
                   Rng& rng) {
  CropBox box;
  box.dz = spec.depth;
  const std::int64_t z_hi = src.z >= spec.depth ? src.z - spec.depth : 0;
  box.z0 = static_cast<int>(rng.uniform_int(0, z_hi));
  box.depth_padded = src.z < spec.depth;

  if (size) {
    box.dy = size->first;
    box.dx = size->second;
    box.y0 = static_cast<int>(rng.uniform_int(0, src.y - box.dy));
    box.x0 = static_cast<int>(rng.uniform_int(0, src.x - box.dx));
    return box;
  }
  rng.next_u64();
  rng.next_u64();
  const double in_ratio = static_cast<double>(src.y) / src.x;
  if (in_ratio < spec.aspect.first) {
    box.dy = src.y;
    box.dx = std::clamp(static_cast<int>(std::lround(src.y / spec.aspect.first)), 1, src.x);
  } else if (in_ratio > spec.aspect.second) {
    box.dx = src.x;
    box.dy = std::clamp(static_cast<int>(std::lround(src.x * spec.aspect.second)), 1, src.y);
  } else {
    box.dy = src.y;
    box.dx = src.x;
  }
  box.y0 = (src.y - box.dy) / 2;
  box.x0 = (src.x - box.dx) / 2;
  box.fallback = true;
  return box;
}

struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w;
};

// Half-pixel-center linear resampling taps from `in` samples to `out`.
Taps linear_taps(int in, int out) {
  Taps t;
  t.i0.resize(static_cast<std::size_t>(out));
  t.i1.resize(static_cast<std::size_t>(out));
  t.w.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const auto k = static_cast<std::size_t>(i);
    t.i0[k] = lo;
    t.i1[k] = std::min(lo + 1, in - 1);
    t.w[k] = src - lo;
  }
  return t;
}

}  // namespace

CropBox place_crop_box(const CropSpec& spec, Extent3 src, double area_fraction, double aspect,
                       Rng& rng) {
  spec.validate();
  const auto [dy, dx] =
      rounded_size(area_fraction * static_cast<double>(src.y) * src.x, aspect);
  std::optional<std::pair<int, int>> size;
  if (dy >= 1 && dx >= 1 && dy <= src.y && dx <= src.x) size = std::pair{dy, dx};
  return finish_box(spec, src, size, rng);
}

CropBox sample_crop_box(const CropSpec& spec, Extent3 src, Rng& rng) {
  spec.validate();
  const double area = static_cast<double>(src.y) * src.x;
  std::optional<std::pair<int, int>> chosen;
  for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
    const double s = rng.uniform(spec.scale.first, spec.scale.second);
    const double a = log_uniform(rng, spec.aspect.first, spec.aspect.second);
    if (chosen) continue;
    const auto [dy, dx] = rounded_size(s * area, a);
    if (acceptable(spec, src, dy, dx)) chosen = std::pair{dy, dx};
  }
  return finish_box(spec, src, chosen, rng);
}

View resize_crop(const Volume& v, const CropBox& box, int out_h, int out_w) {
  const Extent3 src = v.shape();
  if (box.dy < 1 || box.dx < 1 || box.y0 < 0 || box.x0 < 0 || box.y0 + box.dy > src.y ||
      box.x0 + box.dx > src.x || box.z0 < 0 || box.dz < 1) {
    throw ValidationError("crop box outside source extents");
  }
  const Taps ty = linear_taps(box.dy, out_h);
  const Taps tx = linear_taps(box.dx, out_w);
  View out;
  out.data = Grid3<float>({box.dz, out_h, out_w});
  out.box = box;
  out.source_id = v.id;
  for (int k = 0; k < box.dz; ++k) {
    const int z = std::clamp(box.z0 + k, 0, src.z - 1);
    for (int i = 0; i < out_h; ++i) {
      const auto iy = static_cast<std::size_t>(i);
      const int y0 = box.y0 + ty.i0[iy];
      const int y1 = box.y0 + ty.i1[iy];
      const double wy = ty.w[iy];
      for (int j = 0; j < out_w; ++j) {
        const auto jx = static_cast<std::size_t>(j);
        const int x0 = box.x0 + tx.i0[jx];
        const int x1 = box.x0 + tx.i1[jx];
        const double wx = tx.w[jx];
        const double top = v.data(z, y0, x0) * (1.0 - wx) + v.data(z, y0, x1) * wx;
        const double bot = v.data(z, y1, x0) * (1.0 - wx) + v.data(z, y1, x1) * wx;
        out.data(k, i, j) = static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

View apply_gamma(const View& view, double gamma) {
  if (!(gamma > 0.0)) throw ValidationError("gamma must be > 0");
  View out = view;
  if (gamma == 1.0 || view.data.size() == 0) return out;
  const auto [mn_it, mx_it] = std::minmax_element(view.data.values().begin(), view.data.values().end());
  const double mn = *mn_it;
  const double mx = *mx_it;
  if (!(mx > mn)) return out;
  const double range = mx - mn;
  for (auto& x : out.data.values()) {
    const double t = (x - mn) / range;
    x = static_cast<float>(mn + range * std::pow(t, gamma));
  }
  return out;
}

View random_gamma(const View& view, std::pair<double, double> gamma_range, double p, Rng& rng) {
  if (!(gamma_range.first > 0.0 && gamma_range.first <= gamma_range.second)) {
    throw ValidationError("gamma range must be positive");
  }
  const bool apply = rng.bernoulli(p);
  const double gamma = log_uniform(rng, gamma_range.first, gamma_range.second);
  return apply ? apply_gamma(view, gamma) : view;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("blur sigma must be > 0");
  const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

View apply_blur(const View& view, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const Extent3 s = view.data.shape();
  View out = view;
  std::vector<double> tmp(static_cast<std::size_t>(s.y) * s.x);
  for (int z = 0; z < s.z; ++z) {
    for (int y = 0; y < s.y; ++y) {
      for (int x = 0; x < s.x; ++x) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) {
          const int xx = std::clamp(x + t, 0, s.x - 1);
          acc += k[static_cast<std::size_t>(t + r)] * view.data(z, y, xx);
        }
        tmp[static_cast<std::size_t>(y) * s.x + x] = acc;
      }
    }
    for (int y = 0; y < s.y; ++y) {
      for (int x = 0; x < s.x; ++x) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) {
          const int yy = std::clamp(y + t, 0, s.y - 1);
          acc += k[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>(yy) * s.x + x];
        }
        out.data(z, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

View gaussian_blur(const View& view, std::pair<double, double> sigma_range, double p, Rng& rng) {
  if (!(sigma_range.first > 0.0 && sigma_range.first <= sigma_range.second)) {
    throw ValidationError("blur sigma range must be positive");
  }
  const bool apply = rng.bernoulli(p);
  const double sigma = rng.uniform(sigma_range.first, sigma_range.second);
  return apply ? apply_blur(view, sigma) : view;
}

namespace {

View make_view(const Volume& v, const CropSpec& spec, double gamma_p, double blur_p,
               const AugSpec& aug, Rng& rng) {
  const CropBox box = sample_crop_box(spec, v.shape(), rng);
  View view = resize_crop(v, box, spec.out_h, spec.out_w);
  view.kind = spec.kind;
  view = random_gamma(view, aug.gamma, gamma_p, rng);
  return gaussian_blur(view, aug.blur_sigma, blur_p, rng);
}

}  // namespace

MultiCrop make_multicrop(const Volume& v, const CropSpec& global, const CropSpec& local,
                         int n_local, const AugSpec& aug, Rng& rng) {
  if (global.kind != CropKind::global || local.kind != CropKind::local) {
    throw ValidationError("make_multicrop expects a global and a local crop spec");
  }
  if (n_local < 0) throw ValidationError("n_local must be >= 0");
  MultiCrop mc;
  for (int g = 0; g < 2; ++g) {
    Rng view_rng(rng.next_u64());
    mc.globals.push_back(make_view(v, global, aug.gamma_p_global,
                                   g == 0 ? aug.blur_p_global0 : aug.blur_p_global1, aug, view_rng));
  }
  for (int l = 0; l < n_local; ++l) {
    Rng view_rng(rng.next_u64());
    mc.locals.push_back(make_view(v, local, aug.gamma_p_local, aug.blur_p_local, aug, view_rng));
  }
  return mc;
}

}  // namespace tapct
