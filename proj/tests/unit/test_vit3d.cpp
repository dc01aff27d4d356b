// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "tapct/params.hpp"
#include "tapct/vit3d.hpp"

using namespace tapct;

namespace {

ViTConfig tiny_config() {
  ViTConfig c;
  c.embed_dim = 16;
  c.depth_layers = 2;
  c.heads = 2;
  c.patch = {2, 4, 4};
  c.n_registers = 2;
  c.layerscale_init = 0.5;
  c.drop_path = 0.0;
  c.pos_grid = {1, 3, 3};
  return c;
}

Grid3<float> random_view(Extent3 e, std::uint64_t seed) {
  Rng r(seed);
  Grid3<float> g(e);
  for (auto& x : g.values()) x = static_cast<float>(r.normal());
  return g;
}

// Trilinear sample of a scalar table at one output cell, written directly.
double trilinear_point(const Mat<double>& t, int col, Extent3 from, Extent3 to, int z, int y, int x) {
  const auto coord = [](int i, int n_out, int n_in, int& lo, int& hi, double& w) {
    double s = (i + 0.5) * n_in / n_out - 0.5;
    if (s < 0) s = 0;
    lo = std::min(static_cast<int>(s), n_in - 1);
    hi = std::min(lo + 1, n_in - 1);
    w = s - lo;
  };
  int z0, z1, y0, y1, x0, x1;
  double wz, wy, wx;
  coord(z, to.z, from.z, z0, z1, wz);
  coord(y, to.y, from.y, y0, y1, wy);
  coord(x, to.x, from.x, x0, x1, wx);
  const auto at = [&](int a, int b, int c) { return t((a * from.y + b) * from.x + c, col); };
  double v = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        const double w = (a ? wz : 1 - wz) * (b ? wy : 1 - wy) * (c ? wx : 1 - wx);
        v += w * at(a ? z1 : z0, b ? y1 : y0, c ? x1 : x0);
      }
  return v;
}

}  // namespace

TEST(Presets, TokenCountsPerGlobalCrop) {
  for (const char* s : {"tap-s-2d", "tap-b-2d"}) {
    const auto p = model_preset(s);
    EXPECT_EQ(PatchGrid::of(p.global.view_shape(), p.vit.patch).count(), 196) << s;
  }
  for (const char* s : {"tap-s-2.5d", "tap-b-2.5d"}) {
    const auto p = model_preset(s);
    EXPECT_EQ(PatchGrid::of(p.global.view_shape(), p.vit.patch).count(), 1176) << s;
  }
  for (const char* s : {"tap-s-3d", "tap-b-3d"}) {
    const auto p = model_preset(s);
    EXPECT_EQ(PatchGrid::of(p.global.view_shape(), p.vit.patch).count(), 2352) << s;
  }
  EXPECT_EQ(PatchGrid::of({300, 224, 224}, {4, 8, 8}).count(), 58800);
  const auto b = model_preset("tap-b-3d").vit;
  EXPECT_EQ(b.embed_dim, 768);
  EXPECT_EQ(b.heads, 12);
  const auto s = model_preset("tap-s-3d").vit;
  EXPECT_EQ(s.embed_dim, 384);
  EXPECT_EQ(s.heads, 6);
  EXPECT_THROW(model_preset("tap-x"), ValidationError);
}

TEST(Patches, RowOrderAndInPatchOrder) {
  Grid3<float> g({2, 4, 4});
  for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = static_cast<float>(i);
  const Mat<double> p = extract_patches<double>(g, {1, 2, 2});
  ASSERT_EQ(p.rows(), 8);
  ASSERT_EQ(p.cols(), 4);
  EXPECT_EQ(p(0, 0), 0);
  EXPECT_EQ(p(0, 1), 1);
  EXPECT_EQ(p(0, 2), 4);
  EXPECT_EQ(p(1, 0), 2);
  EXPECT_EQ(p(2, 0), 8);
  EXPECT_EQ(p(4, 0), 16);
}

TEST(InterpPos, WorkedOneDimensionalCase) {
  Mat<double> t(2, 1);
  t << 0.0, 2.0;
  const Mat<double> r = interp_pos(t, {1, 1, 2}, {1, 1, 4});
  EXPECT_DOUBLE_EQ(r(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(r(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(r(2, 0), 1.5);
  EXPECT_DOUBLE_EQ(r(3, 0), 2.0);
}

TEST(InterpPos, IdentityIsBitEqual) {
  Rng r(1);
  Mat<float> t(3 * 4 * 5, 6);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(r.normal());
  EXPECT_TRUE((interp_pos(t, {3, 4, 5}, {3, 4, 5}).array() == t.array()).all());
}

TEST(InterpPos, MatchesPointOracle) {
  Rng r(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Extent3 from{static_cast<int>(r.uniform_int(1, 5)), static_cast<int>(r.uniform_int(1, 6)),
                       static_cast<int>(r.uniform_int(1, 6))};
    const Extent3 to{static_cast<int>(r.uniform_int(1, 7)), static_cast<int>(r.uniform_int(1, 8)),
                     static_cast<int>(r.uniform_int(1, 8))};
    Mat<double> t(from.count(), 3);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = r.normal();
    const Mat<double> out = interp_pos(t, from, to);
    for (int z = 0; z < to.z; ++z)
      for (int y = 0; y < to.y; ++y)
        for (int x = 0; x < to.x; ++x)
          for (int c = 0; c < 3; ++c)
            ASSERT_NEAR(out((z * to.y + y) * to.x + x, c), trilinear_point(t, c, from, to, z, y, x), 1e-12);
  }
}

TEST(InterpPos, AdjointIdentity) {
  Rng r(3);
  const Extent3 from{2, 3, 4}, to{3, 5, 2};
  Mat<double> t(from.count(), 2), g(to.count(), 2);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = r.normal();
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = r.normal();
  const double lhs = (interp_pos(t, from, to).array() * g.array()).sum();
  const double rhs = (t.array() * interp_pos_adjoint(g, from, to).array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Params, LayerwiseDecayAndWeightDecayMask) {
  ParamLayout layout;
  const ViTConfig c = tiny_config();
  VisionTransformer<double> vit(c, layout);
  EXPECT_EQ(layout.num_layers, c.depth_layers);
  const auto lr = layerwise_lr_scale<double>(layout, 0.9);
  const auto wd = weight_decay_mask<double>(layout);
  const auto* patch = &layout.find("backbone.patch_embed.weight");
  const auto* block1 = &layout.find("backbone.blocks.1.attn.qkv.weight");
  const auto* gamma = &layout.find("backbone.blocks.0.ls1.gamma");
  const auto* bias = &layout.find("backbone.blocks.0.attn.qkv.bias");
  ASSERT_TRUE(patch && block1 && gamma && bias);
  EXPECT_NEAR(lr[static_cast<std::size_t>(patch->ref.offset)], std::pow(0.9, 3), 1e-15);
  EXPECT_NEAR(lr[static_cast<std::size_t>(block1->ref.offset)], std::pow(0.9, 1), 1e-15);
  EXPECT_EQ(wd[static_cast<std::size_t>(patch->ref.offset)], 1.0);
  EXPECT_EQ(wd[static_cast<std::size_t>(gamma->ref.offset)], 0.0);
  EXPECT_EQ(wd[static_cast<std::size_t>(bias->ref.offset)], 0.0);
}

TEST(VisionTransformer, OutputLayout) {
  ParamLayout layout;
  const ViTConfig c = tiny_config();
  VisionTransformer<double> vit(c, layout);
  Rng r(4);
  std::vector<double> p(static_cast<std::size_t>(layout.total()));
  init_params<double>(layout, p, r);
  const auto out = vit.forward(random_view({4, 8, 12}, 1), p);
  EXPECT_EQ(out.grid, (Extent3{2, 2, 3}));
  EXPECT_EQ(out.tokens.rows(), 1 + 2 + 12);
  EXPECT_EQ(out.tokens.cols(), 16);
  EXPECT_EQ(out.n_patches(), 12);
}

TEST(VisionTransformer, FullyMaskedOutputIgnoresContent) {
  ParamLayout layout;
  VisionTransformer<double> vit(tiny_config(), layout);
  Rng r(5);
  std::vector<double> p(static_cast<std::size_t>(layout.total()));
  init_params<double>(layout, p, r);
  MaskPlan m;
  m.mask = Grid3<std::uint8_t>({2, 2, 2}, 1);
  const auto a = vit.forward(random_view({4, 8, 8}, 1), p, &m);
  const auto b = vit.forward(random_view({4, 8, 8}, 2), p, &m);
  EXPECT_LT((a.tokens - b.tokens).cwiseAbs().maxCoeff(), 1e-12);
  const auto c = vit.forward(random_view({4, 8, 8}, 2), p);
  EXPECT_GT((a.tokens - c.tokens).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(VisionTransformer, GradientMatchesFiniteDifferences) {
  ParamLayout layout;
  VisionTransformer<double> vit(tiny_config(), layout);
  Rng r(6);
  std::vector<double> p(static_cast<std::size_t>(layout.total()));
  init_params<double>(layout, p, r);
  // Nonzero mask token so its gradient path is exercised.
  const auto* mt = &layout.find("backbone.mask_token");
  for (std::size_t i = 0; i < mt->ref.size(); ++i) p[mt->ref.offset + i] = 0.1 * r.normal();
  const Grid3<float> view = random_view({4, 8, 8}, 3);
  MaskPlan m;
  m.mask = Grid3<std::uint8_t>({2, 2, 2}, 0);
  m.mask(0, 1, 0) = 1;
  m.mask(1, 0, 1) = 1;
  const auto probe = vit.forward(view, p, &m);
  Mat<double> w(probe.tokens.rows(), probe.tokens.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = r.normal();
  const auto loss = [&](const std::vector<double>& q) {
    return (vit.forward(view, q, &m).tokens.array() * w.array()).sum();
  };
  VitCache<double> cache;
  vit.forward(view, p, &m, nullptr, &cache);
  std::vector<double> g(p.size(), 0.0);
  vit.backward(w, cache, p, g);

  // Every tensor gets at least one probe, plus random extra coordinates.
  std::vector<std::size_t> idx;
  for (const auto& e : layout.entries()) {
    idx.push_back(static_cast<std::size_t>(e.ref.offset));
    idx.push_back(static_cast<std::size_t>(e.ref.offset + e.ref.size() - 1));
  }
  for (int k = 0; k < 100; ++k) idx.push_back(static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(layout.total()) - 1)));
  for (std::size_t i : idx) {
    std::vector<double> q = p;
    const double h = 1e-5;
    q[i] = p[i] + h;
    const double lp = loss(q);
    q[i] = p[i] - h;
    const double lm = loss(q);
    const double fd = (lp - lm) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
    EXPECT_LT(std::abs(fd - g[i]) / denom, 1e-5) << "param index " << i;
  }
}

TEST(VisionTransformer, DropPathIsDeterministicPerStream) {
  ViTConfig c = tiny_config();
  c.drop_path = 0.5;
  ParamLayout layout;
  VisionTransformer<double> vit(c, layout);
  Rng r(7);
  std::vector<double> p(static_cast<std::size_t>(layout.total()));
  init_params<double>(layout, p, r);
  const auto view = random_view({4, 8, 8}, 4);
  Rng a(1), b(1);
  EXPECT_EQ(vit.forward(view, p, nullptr, &a).tokens, vit.forward(view, p, nullptr, &b).tokens);
  Rng shadow(1);
  for (int i = 0; i < 2 * c.depth_layers; ++i) shadow.next_u64();
  EXPECT_TRUE(a == shadow);
}
