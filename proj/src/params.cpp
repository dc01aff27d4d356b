// SPDX-License-Identifier: Apache-2.0

#include "tapct/params.hpp"

#include <cmath>

namespace tapct {

ParamRef ParamLayout::add(const std::string& name, int rows, int cols, int layer_id, bool decay,
                          InitKind init, double init_value) {
  if (contains(name)) throw ValidationError("duplicate parameter name " + name);
  if (rows < 1 || cols < 1) throw ValidationError("parameter " + name + " has empty shape");
  const std::size_t offset = (total_ + kParamAlign - 1) / kParamAlign * kParamAlign;
  ParamInfo info{name, ParamRef{offset, rows, cols}, layer_id, decay, init, init_value};
  total_ = offset + info.ref.size();
  entries_.push_back(info);
  return info.ref;
}

const ParamInfo& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ValidationError("unknown parameter " + name);
}

bool ParamLayout::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

template <typename T>
void init_params(const ParamLayout& layout, std::span<T> params, Rng& rng) {
  if (params.size() != layout.total()) throw ValidationError("parameter buffer size mismatch");
  for (const auto& e : layout.entries()) {
    T* p = params.data() + e.ref.offset;
    const std::size_t n = e.ref.size();
    switch (e.init) {
      case InitKind::zeros:
        for (std::size_t i = 0; i < n; ++i) p[i] = T(0);
        break;
      case InitKind::ones:
        for (std::size_t i = 0; i < n; ++i) p[i] = T(1);
        break;
      case InitKind::constant:
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(e.init_value);
        break;
      case InitKind::trunc_normal:
        // Normal(0, init_value) truncated to +-2 standard deviations.
        for (std::size_t i = 0; i < n; ++i) {
          double v = 0.0;
          do {
            v = rng.normal();
          } while (v < -2.0 || v > 2.0);
          p[i] = static_cast<T>(v * e.init_value);
        }
        break;
    }
  }
}

template <typename T>
ParamVec<T> layerwise_lr_scale(const ParamLayout& layout, double decay) {
  ParamVec<T> out(layout.total());
  for (const auto& e : layout.entries()) {
    const T s = static_cast<T>(std::pow(decay, layout.num_layers + 1 - e.layer_id));
    for (std::size_t i = 0; i < e.ref.size(); ++i) out[e.ref.offset + i] = s;
  }
  return out;
}

template <typename T>
ParamVec<T> weight_decay_mask(const ParamLayout& layout) {
  ParamVec<T> out(layout.total());
  for (const auto& e : layout.entries()) {
    for (std::size_t i = 0; i < e.ref.size(); ++i) out[e.ref.offset + i] = e.decay ? T(1) : T(0);
  }
  return out;
}

template <typename T>
double l2_norm(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template void init_params<float>(const ParamLayout&, std::span<float>, Rng&);
template void init_params<double>(const ParamLayout&, std::span<double>, Rng&);
template ParamVec<float> layerwise_lr_scale<float>(const ParamLayout&, double);
template ParamVec<double> layerwise_lr_scale<double>(const ParamLayout&, double);
template ParamVec<float> weight_decay_mask<float>(const ParamLayout&);
template ParamVec<double> weight_decay_mask<double>(const ParamLayout&);
template double l2_norm<float>(std::span<const float>);
template double l2_norm<double>(std::span<const double>);

}  // namespace tapct
