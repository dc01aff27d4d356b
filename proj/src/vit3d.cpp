// SPDX-License-Identifier: Apache-2.0

#include "tapct/vit3d.hpp"

#include <cmath>
#include <numbers>

namespace tapct {

void ViTConfig::validate() const {
  if (embed_dim < 1 || depth_layers < 1 || heads < 1) {
    throw ValidationError("embed_dim, depth_layers and heads must be >= 1");
  }
  if (embed_dim % heads != 0) {
    throw ValidationError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                          std::to_string(heads));
  }
  if (!patch.positive() || !pos_grid.positive()) throw ValidationError("patch and pos_grid must be >= 1");
  if (n_registers < 0) throw ValidationError("n_registers must be >= 0");
  if (!(drop_path >= 0.0 && drop_path < 1.0)) throw ValidationError("drop_path must be in [0, 1)");
  if (!(mlp_ratio > 0.0) || mlp_hidden() < 1) throw ValidationError("mlp_ratio must be > 0");
  if (!(ln_eps > 0.0) || !(init_std > 0.0)) throw ValidationError("ln_eps and init_std must be > 0");
}

int ViTConfig::mlp_hidden() const {
  return static_cast<int>(std::lround(embed_dim * mlp_ratio));
}

namespace {

CropSpec crop(int depth, int hw, CropKind kind) {
  CropSpec c;
  c.depth = depth;
  c.out_h = hw;
  c.out_w = hw;
  c.kind = kind;
  c.scale = kind == CropKind::global ? std::pair{0.32, 1.0} : std::pair{0.05, 0.32};
  return c;
}

}  // namespace

ModelPreset model_preset(const std::string& name) {
  ModelPreset m;
  m.name = name;
  ViTConfig& v = m.vit;
  const auto size_of = [&](char s) {
    if (s == 's') {
      v.embed_dim = 384;
      v.depth_layers = 12;
      v.heads = 6;
      v.drop_path = 0.1;
    } else {
      v.embed_dim = 768;
      v.depth_layers = 12;
      v.heads = 12;
      v.drop_path = 0.2;
    }
  };
  if (name == "tap-s-2d" || name == "tap-b-2d") {
    size_of(name[4]);
    v.patch = {1, 16, 16};
    v.pos_grid = {1, 14, 14};
    m.global = crop(1, 224, CropKind::global);
    m.local = crop(1, 96, CropKind::local);
  } else if (name == "tap-s-2.5d" || name == "tap-b-2.5d") {
    size_of(name[4]);
    v.patch = {1, 16, 16};
    v.pos_grid = {6, 14, 14};
    m.global = crop(6, 224, CropKind::global);
    m.local = crop(6, 96, CropKind::local);
  } else if (name == "tap-s-3d" || name == "tap-b-3d") {
    size_of(name[4]);
    v.patch = {4, 8, 8};
    v.pos_grid = {3, 28, 28};
    m.global = crop(12, 224, CropKind::global);
    m.local = crop(12, 96, CropKind::local);
  } else if (name == "desk") {
    v.embed_dim = 64;
    v.depth_layers = 4;
    v.heads = 4;
    v.drop_path = 0.0;
    v.patch = {4, 8, 8};
    v.pos_grid = {2, 8, 8};
    m.global = crop(8, 64, CropKind::global);
    m.local = crop(8, 32, CropKind::local);
  } else {
    throw ValidationError("unknown model preset " + name);
  }
  return m;
}

std::vector<std::string> model_preset_names() {
  return {"tap-s-2d", "tap-b-2d", "tap-s-2.5d", "tap-b-2.5d", "tap-s-3d", "tap-b-3d", "desk"};
}

template <typename T>
Mat<T> extract_patches(const Grid3<float>& view, Extent3 patch) {
  const PatchGrid g = PatchGrid::of(view.shape(), patch);
  const int psize = static_cast<int>(patch.count());
  Mat<T> out(g.count(), psize);
  Eigen::Index t = 0;
  for (int iz = 0; iz < g.tokens.z; ++iz)
    for (int iy = 0; iy < g.tokens.y; ++iy)
      for (int ix = 0; ix < g.tokens.x; ++ix, ++t) {
        int c = 0;
        for (int dz = 0; dz < patch.z; ++dz)
          for (int dy = 0; dy < patch.y; ++dy)
            for (int dx = 0; dx < patch.x; ++dx, ++c) {
              out(t, c) = static_cast<T>(
                  view(iz * patch.z + dz, iy * patch.y + dy, ix * patch.x + dx));
            }
      }
  return out;
}

namespace {

struct AxisTaps {
  std::vector<int> i0, i1;
  std::vector<double> w;
};

AxisTaps axis_taps(int from, int to) {
  AxisTaps t;
  const auto n = static_cast<std::size_t>(to);
  t.i0.resize(n);
  t.i1.resize(n);
  t.w.resize(n);
  for (int i = 0; i < to; ++i) {
    double src = (i + 0.5) * from / to - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > from - 1) lo = from - 1;
    const auto k = static_cast<std::size_t>(i);
    t.i0[k] = lo;
    t.i1[k] = std::min(lo + 1, from - 1);
    t.w[k] = src - lo;
  }
  return t;
}

// Calls f(target_row, source_row, weight) for the 8 corners of every target point.
template <typename F>
void for_each_corner(Extent3 from, Extent3 to, F&& f) {
  const AxisTaps tz = axis_taps(from.z, to.z);
  const AxisTaps ty = axis_taps(from.y, to.y);
  const AxisTaps tx = axis_taps(from.x, to.x);
  Eigen::Index t = 0;
  for (int z = 0; z < to.z; ++z)
    for (int y = 0; y < to.y; ++y)
      for (int x = 0; x < to.x; ++x, ++t) {
        const auto kz = static_cast<std::size_t>(z);
        const auto ky = static_cast<std::size_t>(y);
        const auto kx = static_cast<std::size_t>(x);
        const int zs[2] = {tz.i0[kz], tz.i1[kz]};
        const int ys[2] = {ty.i0[ky], ty.i1[ky]};
        const int xs[2] = {tx.i0[kx], tx.i1[kx]};
        const double wz[2] = {1.0 - tz.w[kz], tz.w[kz]};
        const double wy[2] = {1.0 - ty.w[ky], ty.w[ky]};
        const double wx[2] = {1.0 - tx.w[kx], tx.w[kx]};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const Eigen::Index s = (static_cast<Eigen::Index>(zs[a]) * from.y + ys[b]) * from.x + xs[c];
              f(t, s, wz[a] * wy[b] * wx[c]);
            }
      }
}

}  // namespace

template <typename T>
Mat<T> interp_pos(const Mat<T>& table, Extent3 from, Extent3 to) {
  if (!from.positive() || !to.positive()) throw ValidationError("positional grids must be >= 1");
  if (table.rows() != from.count()) throw ValidationError("positional table rows do not match grid");
  if (from == to) return table;
  Mat<T> out = Mat<T>::Zero(to.count(), table.cols());
  for_each_corner(from, to, [&](Eigen::Index t, Eigen::Index s, double w) {
    if (w != 0.0) out.row(t) += static_cast<T>(w) * table.row(s);
  });
  return out;
}

template <typename T>
Mat<T> interp_pos_adjoint(const Mat<T>& grad, Extent3 from, Extent3 to) {
  if (grad.rows() != to.count()) throw ValidationError("gradient rows do not match target grid");
  if (from == to) return grad;
  Mat<T> out = Mat<T>::Zero(from.count(), grad.cols());
  for_each_corner(from, to, [&](Eigen::Index t, Eigen::Index s, double w) {
    if (w != 0.0) out.row(s) += static_cast<T>(w) * grad.row(t);
  });
  return out;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(1.0 / std::numbers::sqrt2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(1.0 / std::numbers::sqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
void layer_norm_forward(const Mat<T>& x, Eigen::Ref<const RowVec<T>> w,
                        Eigen::Ref<const RowVec<T>> b, double eps, Mat<T>& y, LnCache<T>* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  y.resize(n, d);
  if (cache) {
    cache->xhat.resize(n, d);
    cache->rstd.resize(n);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.row(i).array();
    const T mu = row.mean();
    const T var = (row - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    const auto xh = ((row - mu) * rs).eval();
    y.row(i) = (xh * w.array() + b.array()).matrix();
    if (cache) {
      cache->xhat.row(i) = xh.matrix();
      cache->rstd(i) = rs;
    }
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache,
                           Eigen::Ref<const RowVec<T>> w, Eigen::Map<RowVec<T>> dw,
                           Eigen::Map<RowVec<T>> db) {
  dw += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto dxh = (dy.row(i).array() * w.array()).eval();
    const auto xh = cache.xhat.row(i).array();
    const T m1 = dxh.mean();
    const T m2 = (dxh * xh).mean();
    dx.row(i) = (cache.rstd(i) * (dxh - m1 - xh * m2)).matrix();
  }
  return dx;
}

namespace {

template <typename T>
void softmax_rows(Mat<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const T mx = r.maxCoeff();
    r = (r.array() - mx).exp().matrix();
    r /= r.sum();
  }
}

template <typename T>
Mat<T> apply_gelu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return gelu(v); });
}

}  // namespace

template <typename T>
VisionTransformer<T>::VisionTransformer(const ViTConfig& cfg, ParamLayout& layout,
                                        const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int E = cfg_.embed_dim;
  const int P = static_cast<int>(cfg_.patch.count());
  const int H = cfg_.mlp_hidden();
  const double std_w = cfg_.init_std;
  const std::string p = prefix + ".";
  patch_w_ = layout.add(p + "patch_embed.weight", E, P, 0, true, InitKind::trunc_normal, std_w);
  patch_b_ = layout.add(p + "patch_embed.bias", 1, E, 0, false, InitKind::zeros);
  pos_ = layout.add(p + "pos_embed", static_cast<int>(cfg_.pos_grid.count()), E, 0, true,
                    InitKind::trunc_normal, std_w);
  cls_ = layout.add(p + "cls_token", 1, E, 0, true, InitKind::trunc_normal, 1e-6);
  if (cfg_.n_registers > 0) {
    reg_ = layout.add(p + "register_tokens", cfg_.n_registers, E, 0, true, InitKind::trunc_normal,
                      1e-6);
  }
  mask_token_ = layout.add(p + "mask_token", 1, E, 0, true, InitKind::zeros);
  for (int l = 0; l < cfg_.depth_layers; ++l) {
    const std::string b = p + "blocks." + std::to_string(l) + ".";
    const int id = l + 1;
    BlockRefs r;
    r.norm1_w = layout.add(b + "norm1.weight", 1, E, id, false, InitKind::ones);
    r.norm1_b = layout.add(b + "norm1.bias", 1, E, id, false, InitKind::zeros);
    r.qkv_w = layout.add(b + "attn.qkv.weight", 3 * E, E, id, true, InitKind::trunc_normal, std_w);
    r.qkv_b = layout.add(b + "attn.qkv.bias", 1, 3 * E, id, false, InitKind::zeros);
    r.proj_w = layout.add(b + "attn.proj.weight", E, E, id, true, InitKind::trunc_normal, std_w);
    r.proj_b = layout.add(b + "attn.proj.bias", 1, E, id, false, InitKind::zeros);
    r.ls1 = layout.add(b + "ls1.gamma", 1, E, id, false, InitKind::constant, cfg_.layerscale_init);
    r.norm2_w = layout.add(b + "norm2.weight", 1, E, id, false, InitKind::ones);
    r.norm2_b = layout.add(b + "norm2.bias", 1, E, id, false, InitKind::zeros);
    r.fc1_w = layout.add(b + "mlp.fc1.weight", H, E, id, true, InitKind::trunc_normal, std_w);
    r.fc1_b = layout.add(b + "mlp.fc1.bias", 1, H, id, false, InitKind::zeros);
    r.fc2_w = layout.add(b + "mlp.fc2.weight", E, H, id, true, InitKind::trunc_normal, std_w);
    r.fc2_b = layout.add(b + "mlp.fc2.bias", 1, E, id, false, InitKind::zeros);
    r.ls2 = layout.add(b + "ls2.gamma", 1, E, id, false, InitKind::constant, cfg_.layerscale_init);
    blocks_.push_back(r);
  }
  const int last = cfg_.depth_layers + 1;
  norm_w_ = layout.add(p + "norm.weight", 1, E, last, false, InitKind::ones);
  norm_b_ = layout.add(p + "norm.bias", 1, E, last, false, InitKind::zeros);
  layout.num_layers = cfg_.depth_layers;
}

template <typename T>
void VisionTransformer<T>::block_forward(Mat<T>& x, const BlockRefs& r, std::span<const T> p,
                                         BlockCache<T>& c, bool keep) const {
  const int E = cfg_.embed_dim;
  const int dh = cfg_.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Eigen::Index n = x.rows();
  if (c.s1 != T(0)) {
    layer_norm_forward<T>(x, crow(p, r.norm1_w), crow(p, r.norm1_b), cfg_.ln_eps, c.h1,
                          keep ? &c.ln1 : nullptr);
    c.qkv.noalias() = c.h1 * cmat(p, r.qkv_w).transpose();
    c.qkv.rowwise() += crow(p, r.qkv_b);
    c.cat.resize(n, E);
    if (keep) c.probs.assign(static_cast<std::size_t>(cfg_.heads), Mat<T>());
    Mat<T> probs;
    for (int h = 0; h < cfg_.heads; ++h) {
      const auto q = c.qkv.middleCols(h * dh, dh);
      const auto k = c.qkv.middleCols(E + h * dh, dh);
      const auto v = c.qkv.middleCols(2 * E + h * dh, dh);
      probs.noalias() = q * k.transpose();
      probs *= scale;
      softmax_rows(probs);
      c.cat.middleCols(h * dh, dh).noalias() = probs * v;
      if (keep) c.probs[static_cast<std::size_t>(h)] = std::move(probs);
    }
    c.attn_out.noalias() = c.cat * cmat(p, r.proj_w).transpose();
    c.attn_out.rowwise() += crow(p, r.proj_b);
    x += ((c.attn_out.array().rowwise() * crow(p, r.ls1).array()) * c.s1).matrix();
  }
  if (c.s2 != T(0)) {
    layer_norm_forward<T>(x, crow(p, r.norm2_w), crow(p, r.norm2_b), cfg_.ln_eps, c.h2,
                          keep ? &c.ln2 : nullptr);
    c.fc1.noalias() = c.h2 * cmat(p, r.fc1_w).transpose();
    c.fc1.rowwise() += crow(p, r.fc1_b);
    c.act = apply_gelu(c.fc1);
    c.mlp_out.noalias() = c.act * cmat(p, r.fc2_w).transpose();
    c.mlp_out.rowwise() += crow(p, r.fc2_b);
    x += ((c.mlp_out.array().rowwise() * crow(p, r.ls2).array()) * c.s2).matrix();
  }
}

template <typename T>
void VisionTransformer<T>::block_backward(Mat<T>& dx, const BlockRefs& r, std::span<const T> p,
                                          std::span<T> g, const BlockCache<T>& c) const {
  const int E = cfg_.embed_dim;
  const int dh = cfg_.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  if (c.s2 != T(0)) {
    grow(g, r.ls2) += ((dx.array() * c.mlp_out.array()).colwise().sum() * c.s2).matrix();
    const Mat<T> dm = ((dx.array().rowwise() * crow(p, r.ls2).array()) * c.s2).matrix();
    gmat(g, r.fc2_w).noalias() += dm.transpose() * c.act;
    grow(g, r.fc2_b) += dm.colwise().sum();
    Mat<T> da = dm * cmat(p, r.fc2_w);
    da.array() *= c.fc1.unaryExpr([](T v) { return gelu_grad(v); }).array();
    gmat(g, r.fc1_w).noalias() += da.transpose() * c.h2;
    grow(g, r.fc1_b) += da.colwise().sum();
    const Mat<T> dh2 = da * cmat(p, r.fc1_w);
    dx += layer_norm_backward<T>(dh2, c.ln2, crow(p, r.norm2_w), grow(g, r.norm2_w),
                                 grow(g, r.norm2_b));
  }
  if (c.s1 != T(0)) {
    grow(g, r.ls1) += ((dx.array() * c.attn_out.array()).colwise().sum() * c.s1).matrix();
    const Mat<T> dao = ((dx.array().rowwise() * crow(p, r.ls1).array()) * c.s1).matrix();
    gmat(g, r.proj_w).noalias() += dao.transpose() * c.cat;
    grow(g, r.proj_b) += dao.colwise().sum();
    const Mat<T> dcat = dao * cmat(p, r.proj_w);
    Mat<T> dqkv(dx.rows(), 3 * E);
    Mat<T> dp;
    for (int h = 0; h < cfg_.heads; ++h) {
      const Mat<T>& probs = c.probs[static_cast<std::size_t>(h)];
      const auto d_out = dcat.middleCols(h * dh, dh);
      const auto q = c.qkv.middleCols(h * dh, dh);
      const auto k = c.qkv.middleCols(E + h * dh, dh);
      const auto v = c.qkv.middleCols(2 * E + h * dh, dh);
      dqkv.middleCols(2 * E + h * dh, dh).noalias() = probs.transpose() * d_out;
      dp.noalias() = d_out * v.transpose();
      const Vec<T> rs = (dp.array() * probs.array()).rowwise().sum();
      dp = (probs.array() * (dp.colwise() - rs).array()).matrix() * scale;
      dqkv.middleCols(h * dh, dh).noalias() = dp * k;
      dqkv.middleCols(E + h * dh, dh).noalias() = dp.transpose() * q;
    }
    gmat(g, r.qkv_w).noalias() += dqkv.transpose() * c.h1;
    grow(g, r.qkv_b) += dqkv.colwise().sum();
    const Mat<T> dh1 = dqkv * cmat(p, r.qkv_w);
    dx += layer_norm_backward<T>(dh1, c.ln1, crow(p, r.norm1_w), grow(g, r.norm1_w),
                                 grow(g, r.norm1_b));
  }
}

template <typename T>
EncoderOutput<T> VisionTransformer<T>::forward(const Grid3<float>& view, std::span<const T> params,
                                               const MaskPlan* mask, Rng* drop_rng,
                                               VitCache<T>* cache) const {
  const PatchGrid grid = PatchGrid::of(view.shape(), cfg_.patch);
  if (mask && !(mask->mask.shape() == grid.tokens)) {
    throw ValidationError("mask grid " + to_string(mask->mask.shape()) +
                          " does not match token grid " + to_string(grid.tokens));
  }
  const int R = cfg_.n_registers;
  const Eigen::Index N = grid.count();
  Mat<T> patches = extract_patches<T>(view, cfg_.patch);
  Mat<T> x(1 + R + N, cfg_.embed_dim);
  auto body = x.bottomRows(N);
  body.noalias() = patches * cmat(params, patch_w_).transpose();
  body.rowwise() += crow(params, patch_b_);
  body += interp_pos<T>(Mat<T>(cmat(params, pos_)), cfg_.pos_grid, grid.tokens);
  std::vector<std::uint8_t> masked;
  if (mask) {
    masked = mask->mask.values();
    const auto token = crow(params, mask_token_);
    for (Eigen::Index i = 0; i < N; ++i)
      if (masked[static_cast<std::size_t>(i)]) body.row(i) = token;
  }
  x.row(0) = crow(params, cls_);
  if (R > 0) x.middleRows(1, R) = cmat(params, reg_);

  if (cache) {
    cache->grid = grid.tokens;
    cache->patches = std::move(patches);
    cache->masked = std::move(masked);
    cache->blocks.assign(static_cast<std::size_t>(cfg_.depth_layers), BlockCache<T>());
  }
  BlockCache<T> scratch;
  const double keep_prob = 1.0 - cfg_.drop_path;
  for (int l = 0; l < cfg_.depth_layers; ++l) {
    BlockCache<T>& c = cache ? cache->blocks[static_cast<std::size_t>(l)] : scratch;
    c.s1 = T(1);
    c.s2 = T(1);
    if (drop_rng) {
      const double u1 = drop_rng->uniform();
      const double u2 = drop_rng->uniform();
      if (cfg_.drop_path > 0.0) {
        c.s1 = u1 < keep_prob ? static_cast<T>(1.0 / keep_prob) : T(0);
        c.s2 = u2 < keep_prob ? static_cast<T>(1.0 / keep_prob) : T(0);
      }
    }
    block_forward(x, blocks_[static_cast<std::size_t>(l)], params, c, cache != nullptr);
  }
  EncoderOutput<T> out;
  out.grid = grid.tokens;
  out.n_registers = R;
  layer_norm_forward<T>(x, crow(params, norm_w_), crow(params, norm_b_), cfg_.ln_eps, out.tokens,
                        cache ? &cache->norm : nullptr);
  return out;
}

template <typename T>
void VisionTransformer<T>::backward(const Mat<T>& grad_tokens, const VitCache<T>& cache,
                                    std::span<const T> params, std::span<T> grads) const {
  const int R = cfg_.n_registers;
  const Eigen::Index N = cache.grid.count();
  if (grad_tokens.rows() != 1 + R + N || grad_tokens.cols() != cfg_.embed_dim) {
    throw ValidationError("token gradient shape does not match the cached forward pass");
  }
  Mat<T> dx = layer_norm_backward<T>(grad_tokens, cache.norm, crow(params, norm_w_),
                                     grow(grads, norm_w_), grow(grads, norm_b_));
  for (int l = cfg_.depth_layers - 1; l >= 0; --l) {
    const auto k = static_cast<std::size_t>(l);
    block_backward(dx, blocks_[k], params, grads, cache.blocks[k]);
  }
  grow(grads, cls_) += dx.row(0);
  if (R > 0) gmat(grads, reg_) += dx.middleRows(1, R);
  Mat<T> dbody = dx.bottomRows(N);
  if (!cache.masked.empty()) {
    auto dmask = grow(grads, mask_token_);
    for (Eigen::Index i = 0; i < N; ++i) {
      if (cache.masked[static_cast<std::size_t>(i)]) {
        dmask += dbody.row(i);
        dbody.row(i).setZero();
      }
    }
  }
  gmat(grads, pos_) += interp_pos_adjoint<T>(dbody, cfg_.pos_grid, cache.grid);
  gmat(grads, patch_w_).noalias() += dbody.transpose() * cache.patches;
  grow(grads, patch_b_) += dbody.colwise().sum();
}

#define TAPCT_INSTANTIATE(T)                                                                       \
  template Mat<T> extract_patches<T>(const Grid3<float>&, Extent3);                                \
  template Mat<T> interp_pos<T>(const Mat<T>&, Extent3, Extent3);                                  \
  template Mat<T> interp_pos_adjoint<T>(const Mat<T>&, Extent3, Extent3);                          \
  template T gelu<T>(T);                                                                           \
  template T gelu_grad<T>(T);                                                                      \
  template void layer_norm_forward<T>(const Mat<T>&, Eigen::Ref<const RowVec<T>>,                  \
                                      Eigen::Ref<const RowVec<T>>, double, Mat<T>&, LnCache<T>*);  \
  template Mat<T> layer_norm_backward<T>(const Mat<T>&, const LnCache<T>&,                         \
                                         Eigen::Ref<const RowVec<T>>, Eigen::Map<RowVec<T>>,       \
                                         Eigen::Map<RowVec<T>>);                                   \
  template class VisionTransformer<T>;

TAPCT_INSTANTIATE(float)
TAPCT_INSTANTIATE(double)

#undef TAPCT_INSTANTIATE

}  // namespace tapct
