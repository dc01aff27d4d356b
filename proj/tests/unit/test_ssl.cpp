// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "tapct/ssl.hpp"

using namespace tapct;

namespace {

Mat<double> randn(int r, int c, Rng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

Mat<double> softmax_rows(const Mat<double>& x) {
  Mat<double> p = x;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i) = (p.row(i).array() - p.row(i).maxCoeff()).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Central differences of f over every entry of every matrix in `xs`.
void check_fd(std::vector<Mat<double>>& xs, const std::vector<Mat<double>>& analytic,
              const std::function<double()>& f, double tol) {
  for (std::size_t v = 0; v < xs.size(); ++v)
    for (Eigen::Index i = 0; i < xs[v].size(); ++i) {
      double& x = xs[v].data()[i];
      const double keep = x;
      const double h = 1e-6;
      x = keep + h;
      const double lp = f();
      x = keep - h;
      const double lm = f();
      x = keep;
      const double fd = (lp - lm) / (2 * h);
      const double a = analytic[v].data()[i];
      EXPECT_LT(std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-8}), tol) << v << "," << i;
    }
}

}  // namespace

TEST(DinoLoss, UniformEqualsLogK) {
  const int k = 65536;
  std::vector<Mat<double>> s(3, Mat<double>::Zero(2, k));
  std::vector<Mat<double>> t(2, Mat<double>::Constant(2, k, 1.0 / k));
  EXPECT_NEAR(dino_loss(s, t, 0.1), std::log(65536.0), 1e-6);
  EXPECT_NEAR(std::log(65536.0), 11.0904, 1e-4);
}

TEST(DinoLoss, OneHotTeacherUniformStudentIsLn2) {
  std::vector<Mat<double>> s(2, Mat<double>::Zero(1, 2));
  Mat<double> p(1, 2);
  p << 1.0, 0.0;
  std::vector<Mat<double>> t(2, p);
  EXPECT_NEAR(dino_loss(s, t, 0.1), std::log(2.0), 1e-12);
}

TEST(DinoLoss, MatchedStudentAttainsTeacherEntropy) {
  Rng r(1);
  const Mat<double> tl = randn(3, 6, r);
  const RowVec<double> center = RowVec<double>::Zero(6);
  const double ts = 0.1, tt = 0.04;
  const Mat<double> p = teacher_softmax(tl, center, tt);
  std::vector<Mat<double>> s(2, (tl * (ts / tt)).array() + 2.0);
  std::vector<Mat<double>> tp(2, p);
  EXPECT_NEAR(dino_loss(s, tp, ts), mean_entropy(p), 1e-10);
  std::vector<Mat<double>> other(2, randn(3, 6, r));
  EXPECT_GT(dino_loss(other, tp, ts), mean_entropy(p));
}

TEST(DinoLoss, GradientMatchesFiniteDifferences) {
  Rng r(2);
  std::vector<Mat<double>> s{randn(3, 5, r), randn(3, 5, r), randn(3, 5, r), randn(3, 5, r)};
  std::vector<Mat<double>> t{softmax_rows(randn(3, 5, r)), softmax_rows(randn(3, 5, r))};
  std::vector<Mat<double>> g;
  dino_loss(s, t, 0.1, &g);
  check_fd(s, g, [&] { return dino_loss(s, t, 0.1); }, 1e-4);
}

TEST(DinoLoss, RawTeacherFormCentersAndSharpens) {
  Rng r(3);
  std::vector<Mat<double>> s{randn(2, 4, r), randn(2, 4, r), randn(2, 4, r)};
  std::vector<Mat<double>> tl{randn(2, 4, r), randn(2, 4, r)};
  const RowVec<double> c = randn(1, 4, r);
  std::vector<Mat<double>> tp{teacher_softmax(tl[0], c, 0.05), teacher_softmax(tl[1], c, 0.05)};
  EXPECT_NEAR(dino_loss(s, tl, c, 0.1, 0.05), dino_loss(s, tp, 0.1), 1e-14);
  EXPECT_THROW(dino_loss(s, tp, 0.0), ValidationError);
}

TEST(IbotLoss, EmptyPlanAndLn2) {
  std::vector<Mat<double>> s{Mat<double>(0, 2)};
  std::vector<Mat<double>> t{Mat<double>(0, 2)};
  EXPECT_EQ(ibot_loss(s, t, 0.1), 0.0);
  Mat<double> p(1, 2);
  p << 1.0, 0.0;
  std::vector<Mat<double>> s1{Mat<double>::Zero(1, 2)};
  std::vector<Mat<double>> t1{p};
  EXPECT_NEAR(ibot_loss(s1, t1, 0.1), std::log(2.0), 1e-12);
}

TEST(IbotLoss, PermutationInvariantAndGradient) {
  Rng r(4);
  std::vector<Mat<double>> s{randn(3, 4, r), randn(2, 4, r), Mat<double>(0, 4)};
  std::vector<Mat<double>> t{softmax_rows(randn(3, 4, r)), softmax_rows(randn(2, 4, r)), Mat<double>(0, 4)};
  const double base = ibot_loss(s, t, 0.1);
  std::vector<Mat<double>> sp = s, tp = t;
  sp[0].row(0).swap(sp[0].row(2));
  tp[0].row(0).swap(tp[0].row(2));
  EXPECT_NEAR(ibot_loss(sp, tp, 0.1), base, 1e-14);
  std::vector<Mat<double>> g;
  ibot_loss(s, t, 0.1, &g);
  check_fd(s, g, [&] { return ibot_loss(s, t, 0.1); }, 1e-4);
}

TEST(Koleo, WorkedExamples) {
  Mat<double> anti(2, 3);
  anti << 1, 0, 0, -1, 0, 0;
  EXPECT_NEAR(koleo_loss(anti, 0.0), -std::log(2.0), 1e-12);
  Mat<double> same(2, 3);
  same << 0.3, 0.4, 0.5, 0.3, 0.4, 0.5;
  EXPECT_NEAR(koleo_loss(same, 1e-8), -std::log(1e-8), 1e-6);
  EXPECT_NEAR(-std::log(1e-8), 18.42, 5e-3);
  EXPECT_THROW(koleo_loss(Mat<double>(Mat<double>::Ones(1, 3)), 1e-8), ValidationError);
}

TEST(Koleo, PermutationInvariantAndGradient) {
  Rng r(5);
  std::vector<Mat<double>> x{randn(4, 3, r)};
  Mat<double> perm = x[0];
  perm.row(0).swap(perm.row(3));
  EXPECT_NEAR(koleo_loss(perm, 1e-8), koleo_loss(x[0], 1e-8), 1e-14);
  std::vector<Mat<double>> g(1);
  koleo_loss(x[0], 1e-8, &g[0]);
  check_fd(x, g, [&] { return koleo_loss(x[0], 1e-8); }, 1e-4);
}

TEST(Teacher, EmaUpdates) {
  std::vector<double> s{0.0, 2.0}, t{1.0, 1.0};
  update_teacher<double>(s, t, 0.992);
  EXPECT_NEAR(t[0], 0.992, 1e-12);
  std::vector<double> t1{1.0, 1.0};
  update_teacher<double>(s, t1, 1.0);
  EXPECT_EQ(t1, (std::vector<double>{1.0, 1.0}));
  update_teacher<double>(s, t1, 0.0);
  EXPECT_EQ(t1, s);
  // Distance to a fixed student shrinks by exactly m per step.
  std::vector<double> t2{3.0, -1.0};
  double prev = std::abs(t2[1] - s[1]);
  for (int i = 0; i < 5; ++i) {
    update_teacher<double>(s, t2, 0.9);
    const double d = std::abs(t2[1] - s[1]);
    EXPECT_NEAR(d, 0.9 * prev, 1e-12);
    prev = d;
  }
}

TEST(Center, OneStepAndGeometricConvergence) {
  Center<double> c(3, 0.9);
  Mat<double> batch(2, 3);
  batch << 1, 2, 3, 3, 4, 5;
  const RowVec<double> v = batch.colwise().mean();
  c.update(batch);
  EXPECT_LT((c.value - 0.1 * v).cwiseAbs().maxCoeff(), 1e-15);
  double prev = (c.value - v).norm();
  c.update(batch);
  EXPECT_NEAR((c.value - v).norm(), 0.9 * prev, 1e-12);
  Center<double> frozen(3, 1.0);
  frozen.update(batch);
  EXPECT_EQ(frozen.value, RowVec<double>::Zero(3));
}

TEST(Schedules, Endpoints) {
  ScheduleConfig cfg;
  cfg.batch_scale = 0.5;
  const std::int64_t total = 1000;
  const auto s0 = schedules(0, total, cfg);
  EXPECT_EQ(s0.lr, 0.0);
  EXPECT_EQ(s0.teacher_momentum, 0.992);
  EXPECT_EQ(s0.teacher_temp, 0.04);
  EXPECT_EQ(s0.weight_decay, 0.04);
  const auto sw = schedules(200, total, cfg);
  EXPECT_EQ(sw.lr, 0.0035 * 0.5);
  const auto se = schedules(total, total, cfg);
  EXPECT_EQ(se.teacher_momentum, 1.0);
  EXPECT_EQ(se.teacher_temp, 0.07);
  EXPECT_EQ(se.weight_decay, 0.4);
  EXPECT_DOUBLE_EQ(se.lr, 0.0035 * 1e-2);
  EXPECT_EQ(schedules(300, total, cfg).teacher_temp, 0.07);
  EXPECT_NEAR(schedules(150, total, cfg).teacher_temp, 0.055, 1e-15);
  EXPECT_THROW(schedules(total + 1, total, cfg), ValidationError);
  for (std::int64_t i = 0; i <= total; i += 50) {
    const auto s = schedules(i, total, cfg);
    EXPECT_GE(s.teacher_momentum, 0.992);
    EXPECT_LE(s.teacher_momentum, 1.0);
    EXPECT_GE(s.lr, 0.0);
  }
}

TEST(DinoHead, ShapesZeroPrototypesAndGradient) {
  HeadConfig hc{8, 6, 3, 4, false};
  ParamLayout layout;
  DinoHead<double> head(hc, 5, layout, "head", 1);
  Rng r(6);
  ParamVec<double> p(layout.total());
  init_params<double>(layout, p, r);
  // Bring the bottleneck output to unit scale; at init its norm is ~1e-3 and
  // central differences would be dominated by the normalization curvature.
  for (auto& v : p) v *= 25.0;
  const Mat<double> x = randn(3, 5, r);
  const Mat<double> logits = head.forward(x, p);
  EXPECT_EQ(logits.rows(), 3);
  EXPECT_EQ(logits.cols(), 8);

  ParamVec<double> zero = p;
  const auto& last = head.prototypes();
  std::fill(zero.begin() + static_cast<std::ptrdiff_t>(last.offset),
            zero.begin() + static_cast<std::ptrdiff_t>(last.offset + last.size()), 0.0);
  EXPECT_EQ(head.forward(x, zero).cwiseAbs().maxCoeff(), 0.0);

  const Mat<double> w = randn(3, 8, r);
  HeadCache<double> cache;
  head.forward(x, p, &cache);
  ParamVec<double> g(p.size(), 0.0);
  const Mat<double> dx = head.backward(w, cache, p, g);
  const auto loss = [&](const ParamVec<double>& q, const Mat<double>& in) {
    return (head.forward(in, q).array() * w.array()).sum();
  };
  for (std::size_t i = 0; i < p.size(); ++i) {
    ParamVec<double> q = p;
    q[i] += 1e-6;
    const double lp = loss(q, x);
    q[i] -= 2e-6;
    const double lm = loss(q, x);
    const double fd = (lp - lm) / 2e-6;
    EXPECT_LT(std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-7}), 1e-4) << i << " fd " << fd << " g " << g[i];
  }
  std::vector<Mat<double>> xs{x};
  check_fd(xs, {dx}, [&] { return loss(p, xs[0]); }, 1e-4);
}

TEST(DinoHead, DefaultPrototypeCount) {
  EXPECT_EQ(HeadConfig{}.prototypes, 65536);
  EXPECT_EQ(HeadConfig{}.bottleneck, 256);
}
