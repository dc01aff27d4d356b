// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "tapct/eval.hpp"
#include "tapct/metrics.hpp"
#include "tapct/trainer.hpp"

using namespace tapct;
namespace fs = std::filesystem;

namespace {

// Encoder whose patch embedding depends only on that patch's voxels.
FrozenEncoder local_encoder(Extent3 patch) {
  return [patch](const Grid3<float>& w) {
    const PatchGrid g = PatchGrid::of(w.shape(), patch);
    const Mat<float> p = extract_patches<float>(w, patch);
    WindowEncoding e;
    e.grid = g.tokens;
    e.patches.resize(p.rows(), 3);
    e.patches.col(0) = p.rowwise().mean();
    e.patches.col(1) = p.rowwise().maxCoeff();
    e.patches.col(2) = p.col(0);
    e.cls = RowVec<float>::Constant(3, w.values()[0]);
    return e;
  };
}

Volume random_volume(Extent3 e, std::uint64_t seed) {
  Rng r(seed);
  Volume v;
  v.data = Grid3<float>(e);
  for (auto& x : v.data.values()) x = static_cast<float>(r.normal());
  v.spacing = {2.0, 1.0, 1.0};
  v.id = "v";
  return v;
}

}  // namespace

TEST(WindowStarts, TilingArithmetic) {
  EXPECT_EQ(window_starts(24, 12, 12), (std::vector<int>{0, 12}));
  EXPECT_EQ(window_starts(70, 16, 16), (std::vector<int>{0, 16, 32, 48, 54}));
  EXPECT_EQ(window_starts(16, 16, 8), (std::vector<int>{0}));
  EXPECT_EQ(window_starts(32, 16, 8), (std::vector<int>{0, 8, 16}));
  EXPECT_THROW(window_starts(8, 16, 8), ValidationError);
}

TEST(ExtractEmbeddings, NonOverlappingEqualsPerWindowOutputs) {
  const Extent3 patch{2, 4, 4};
  const Volume v = random_volume({24, 16, 16}, 1);
  const FrozenEncoder enc = local_encoder(patch);
  const EmbeddingField f = extract_embeddings(enc, v, {12, 16, 16}, {12, 16, 16}, patch);
  EXPECT_EQ(f.grid, (Extent3{12, 4, 4}));
  EXPECT_TRUE(std::all_of(f.coverage.begin(), f.coverage.end(), [](int c) { return c == 1; }));
  EXPECT_EQ(f.cls.rows(), 2);
  for (int w = 0; w < 2; ++w) {
    Grid3<float> win({12, 16, 16});
    for (int z = 0; z < 12; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) win(z, y, x) = v.data(12 * w + z, y, x);
    const WindowEncoding e = enc(win);
    for (Eigen::Index t = 0; t < e.patches.rows(); ++t) {
      EXPECT_EQ(f.values.row(w * 96 + t), e.patches.row(t));
    }
  }
}

TEST(ExtractEmbeddings, OverlapAveragesToTheSameLocalFeatures) {
  const Extent3 patch{2, 4, 4};
  const Volume v = random_volume({8, 32, 32}, 2);
  const FrozenEncoder enc = local_encoder(patch);
  const EmbeddingField a = extract_embeddings(enc, v, {4, 16, 16}, {4, 16, 16}, patch);
  const EmbeddingField b = extract_embeddings(enc, v, {4, 16, 16}, {2, 8, 8}, patch);
  EXPECT_LT((a.values - b.values).cwiseAbs().maxCoeff(), 1e-6);
  // Interior cells along y are covered twice by half-window strides.
  EXPECT_EQ(b.coverage[static_cast<std::size_t>((0 * 8 + 3) * 8 + 0)], 2);
  EXPECT_EQ(*std::max_element(b.coverage.begin(), b.coverage.end()), 8);
}

TEST(ExtractEmbeddings, ConstantEncoderGivesConstantField) {
  const Extent3 patch{1, 2, 2};
  const FrozenEncoder enc = [](const Grid3<float>& w) {
    WindowEncoding e;
    e.grid = {w.shape().z, w.shape().y / 2, w.shape().x / 2};
    e.patches = Mat<float>::Constant(e.grid.count(), 2, 0.3f);
    e.cls = RowVec<float>::Constant(2, 0.3f);
    return e;
  };
  const EmbeddingField f = extract_embeddings(enc, random_volume({3, 10, 10}, 3), {2, 4, 4}, {1, 2, 2}, patch);
  EXPECT_LT((f.values.array() - 0.3f).abs().maxCoeff(), 1e-7);
}

TEST(ExtractEmbeddings, PadsToPatchGridAndRejectsOversizedWindow) {
  const Extent3 patch{2, 4, 4};
  const FrozenEncoder enc = local_encoder(patch);
  const EmbeddingField f = extract_embeddings(enc, random_volume({5, 13, 16}, 4), {2, 8, 8}, {2, 8, 8}, patch);
  EXPECT_EQ(f.grid, (Extent3{3, 4, 4}));
  EXPECT_EQ(f.volume_shape, (Extent3{5, 13, 16}));
  EXPECT_THROW(extract_embeddings(enc, random_volume({4, 8, 8}, 4), {2, 16, 8}, {2, 16, 8}, patch),
               ValidationError);
  EXPECT_THROW(extract_embeddings(enc, random_volume({4, 8, 8}, 4), {2, 8, 8}, {1, 8, 8}, patch),
               ValidationError);
}

TEST(ExtractEmbeddings, RealBackboneShapes) {
  TrainConfig cfg = TrainConfig::from_config(Config::parse("model.embed_dim=16\nmodel.depth_layers=1\nmodel.heads=2\n"));
  const FrozenBackbone bb = random_backbone(cfg, NormStats{0.0, 1.0, -10.0, 10.0});
  EXPECT_EQ(bb.window(), (Extent3{8, 64, 64}));
  const EmbeddingField f =
      extract_embeddings(make_encoder(bb), random_volume({16, 64, 64}, 5), bb.window(), bb.window(), bb.config().patch);
  EXPECT_EQ(f.grid, (Extent3{4, 8, 8}));
  EXPECT_EQ(f.dim, 16);
  EXPECT_EQ(f.cls.rows(), 2);
}

TEST(Field, SaveLoadRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "tapct_eval_field";
  fs::remove_all(dir);
  const Extent3 patch{2, 4, 4};
  const EmbeddingField f = extract_embeddings(local_encoder(patch), random_volume({4, 8, 8}, 6), {2, 8, 8}, {2, 8, 8}, patch);
  save_field(f, dir / "vol");
  const EmbeddingField g = load_field(dir / "vol");
  EXPECT_EQ(g.values, f.values);
  EXPECT_EQ(g.cls, f.cls);
  EXPECT_EQ(g.grid, f.grid);
  EXPECT_EQ(g.volume_shape, f.volume_shape);
  EXPECT_EQ(g.coverage, f.coverage);
  EXPECT_EQ(g.spacing, f.spacing);
}

TEST(SegProbe, ConstantLogitsUpsampleToConstant) {
  EmbeddingField f;
  f.grid = {2, 2, 2};
  f.patch = {2, 4, 4};
  f.dim = 1;
  f.volume_shape = {3, 7, 8};
  f.values = Mat<float>::Ones(8, 1);
  f.coverage.assign(8, 1);
  SegHead h{Mat<double>::Constant(2, 1, 0.5), RowVec<double>::Zero(2)};
  h.bias(1) = 1.0;
  const Mat<double> l = seg_voxel_logits(h, f);
  EXPECT_EQ(l.rows(), 3 * 7 * 8);
  EXPECT_LT((l.col(0).array() - 0.5).abs().maxCoeff(), 1e-12);
  EXPECT_LT((l.col(1).array() - 1.5).abs().maxCoeff(), 1e-12);
}

TEST(SegProbe, LearnsSeparableCellsAndDegenerateLabels) {
  // Cells carry a one-hot class code; labels are constant within each cell.
  const Extent3 patch{1, 2, 2};
  std::vector<EmbeddingField> fields;
  std::vector<LabelMap> labels;
  Rng r(7);
  for (int n = 0; n < 6; ++n) {
    EmbeddingField f;
    f.grid = {2, 4, 4};
    f.patch = patch;
    f.dim = 3;
    f.volume_shape = {2, 8, 8};
    f.values = Mat<float>::Zero(32, 3);
    f.coverage.assign(32, 1);
    LabelMap l;
    l.labels = Grid3<std::uint16_t>({2, 8, 8}, 0);
    for (int c = 0; c < 32; ++c) {
      const int k = static_cast<int>(r.uniform_int(0, 2));
      f.values(c, k) = 1.0f;
      const int z = c / 16, y = (c / 4) % 4, x = c % 4;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) l.labels(z, 2 * y + dy, 2 * x + dx) = static_cast<std::uint16_t>(k);
    }
    fields.push_back(f);
    labels.push_back(l);
  }
  SegTrainConfig cfg;
  cfg.epochs = 150;
  cfg.lr = 0.05;
  cfg.accum = 1;
  const SegHead h = train_seg(fields, labels, 3, cfg);
  // Cell interiors are recovered; boundary voxels blend neighbours.
  const LabelMap pred = predict_seg(h, fields[0]);
  int agree = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) agree += pred.labels.values()[i] == labels[0].labels.values()[i];
  EXPECT_GT(agree, static_cast<int>(0.6 * static_cast<double>(pred.labels.size())));

  std::vector<LabelMap> zeros(labels.size());
  for (auto& z : zeros) z.labels = Grid3<std::uint16_t>({2, 8, 8}, 0);
  double loss = 1.0;
  cfg.epochs = 200;
  const SegHead h0 = train_seg(fields, zeros, 3, cfg, &loss);
  EXPECT_LT(loss, 0.05);
  const LabelMap p0 = predict_seg(h0, fields[1]);
  for (auto v : p0.labels.values()) EXPECT_EQ(v, 0);

  zeros[0].labels(0, 0, 0) = 3;
  EXPECT_THROW(train_seg(fields, zeros, 3, cfg), ValidationError);
}

TEST(LesionCrop, ExtentsFollowSpacing) {
  Volume v;
  v.data = Grid3<float>({60, 80, 80}, 1.0f);
  v.spacing = {1.0, 1.0, 1.0};
  EXPECT_EQ(lesion_crop(v, {30, 40, 40}, 50.0).shape(), (Extent3{50, 50, 50}));
  v.spacing = {2.0, 1.0, 1.0};
  EXPECT_EQ(lesion_crop(v, {60, 40, 40}, 50.0).shape(), (Extent3{25, 50, 50}));
}

TEST(LesionCrop, CornerCenterReplicatesEdges) {
  Volume v;
  v.data = Grid3<float>({10, 10, 10});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data.values()[i] = static_cast<float>(i);
  const Volume c = lesion_crop(v, {0, 0, 0}, 6.0);
  EXPECT_EQ(c.shape(), (Extent3{6, 6, 6}));
  EXPECT_EQ(c.data(0, 0, 0), v.data(0, 0, 0));
  EXPECT_EQ(c.data(5, 5, 5), v.data(2, 2, 2));
  EXPECT_EQ(c.data(1, 1, 1), v.data(0, 0, 0));
  EXPECT_THROW(lesion_crop(v, {20, 0, 0}, 6.0), ValidationError);
}

TEST(Abmil, SingletonDuplicationAndNormalization) {
  const AbmilHead h = init_abmil(6, 5, 2, 1);
  AbmilHead hc = h;
  Rng r(8);
  hc.c = Mat<double>::Random(2, 6);
  Mat<double> one(1, 6);
  for (int i = 0; i < 6; ++i) one(0, i) = r.normal();
  EXPECT_EQ(abmil_forward(hc, one).attention(0), 1.0);
  Mat<double> bag(7, 6);
  for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = r.normal();
  Mat<double> twice(14, 6);
  twice << bag, bag;
  const AbmilOutput a = abmil_forward(hc, bag);
  const AbmilOutput b = abmil_forward(hc, twice);
  EXPECT_LT((a.pooled - b.pooled).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.logits - b.logits).cwiseAbs().maxCoeff(), 1e-12);
  Mat<double> big(10000, 6);
  for (Eigen::Index i = 0; i < big.size(); ++i) big.data()[i] = r.normal();
  EXPECT_NEAR(abmil_forward(hc, big).attention.sum(), 1.0, 1e-6);
  EXPECT_THROW(abmil_forward(hc, Mat<double>(0, 6)), ValidationError);
}

TEST(Abmil, SeparableBagsReachPerfectTrainingAuc) {
  Rng r(9);
  std::vector<Mat<double>> bags;
  Mat<int> labels(40, 1);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    Mat<double> b(4, 5);
    for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = 0.3 * r.normal();
    b.col(0).array() += y ? 1.0 : -1.0;
    bags.push_back(b);
    labels(i, 0) = y;
  }
  ClsTrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 1e-2;
  cfg.accum = 4;
  const AbmilHead h = train_cls(bags, labels, cfg);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 40; ++i) {
    s.push_back(abmil_forward(h, bags[static_cast<std::size_t>(i)]).logits(0));
    y.push_back(labels(i, 0));
  }
  EXPECT_EQ(auc(s, y), 1.0);
}

TEST(Abmil, ShuffledLabelsGiveChanceAuc) {
  Rng r(10);
  const auto make = [&](int n, std::vector<Mat<double>>& bags, Mat<int>& labels) {
    labels.resize(n, 1);
    for (int i = 0; i < n; ++i) {
      Mat<double> b(3, 4);
      for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = r.normal();
      bags.push_back(b);
      labels(i, 0) = r.bernoulli(0.5);
    }
  };
  std::vector<Mat<double>> train, test;
  Mat<int> ytr, yte;
  make(200, train, ytr);
  make(400, test, yte);
  ClsTrainConfig cfg;
  cfg.epochs = 10;
  const AbmilHead h = train_cls(train, ytr, cfg);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 400; ++i) {
    s.push_back(abmil_forward(h, test[static_cast<std::size_t>(i)]).logits(0));
    y.push_back(yte(i, 0));
  }
  EXPECT_NEAR(auc(s, y), 0.5, 0.1);
}

TEST(Abmil, ConstantTrainingLabelWarns) {
  std::vector<Mat<double>> bags(4, Mat<double>::Ones(2, 3));
  Mat<int> labels(4, 2);
  labels << 0, 1, 0, 0, 0, 1, 0, 0;
  std::vector<std::string> warnings;
  train_cls(bags, labels, ClsTrainConfig{}, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("label 0"), std::string::npos);
}
