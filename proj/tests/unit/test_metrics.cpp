// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "tapct/metrics.hpp"

using namespace tapct;

namespace {

LabelMap lm(std::vector<std::uint16_t> v) {
  LabelMap l;
  const int n = static_cast<int>(v.size());
  l.labels = Grid3<std::uint16_t>({1, 1, n}, std::move(v));
  return l;
}

double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      den += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return num / den;
}

}  // namespace

TEST(Dice, WorkedExamples) {
  EXPECT_EQ(dice_macro(lm({0, 1, 2, 2}), lm({0, 1, 2, 2}), 3), 1.0);
  EXPECT_EQ(dice_macro(lm({1, 1, 0, 0}), lm({0, 1, 1, 0}), 2), 0.5);
  const auto d = dice_per_class(lm({1, 1, 0}), lm({0, 0, 1}), 3);
  EXPECT_EQ(d[1], 0.0);
  EXPECT_TRUE(std::isnan(d[2]));
  EXPECT_EQ(dice_macro(lm({1, 1, 0}), lm({0, 0, 1}), 3), 0.0);
  EXPECT_EQ(dice_macro(lm({0, 0}), lm({0, 0}), 3), 1.0);
  EXPECT_THROW(dice_macro(lm({0}), lm({0, 0}), 2), ValidationError);
}

TEST(Auc, WorkedExamples) {
  const std::vector<double> s{0.9, 0.1};
  const std::vector<int> y{1, 0};
  EXPECT_EQ(auc(s, y), 1.0);
  EXPECT_EQ(average_precision(s, y), 1.0);
  const std::vector<double> tie{0.3, 0.3, 0.3, 0.3};
  const std::vector<int> bal{1, 0, 1, 0};
  EXPECT_EQ(auc(tie, bal), 0.5);
  const std::vector<double> s3{0.8, 0.6, 0.4};
  const std::vector<int> y3{1, 0, 1};
  EXPECT_EQ(auc(s3, y3), 0.5);
  EXPECT_NEAR(average_precision(s3, y3), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
}

TEST(Auc, DegenerateLabelsRejected) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> ones{1, 1};
  const std::vector<int> zeros{0, 0};
  try {
    auc(s, ones);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("AUC undefined"), std::string::npos);
  }
  EXPECT_THROW(average_precision(s, zeros), ValidationError);
  EXPECT_NO_THROW(average_precision(s, ones));
  const std::vector<double> bad{std::numeric_limits<double>::quiet_NaN(), 0.0};
  EXPECT_THROW(auc(bad, std::vector<int>{1, 0}), ValidationError);
}

TEST(Auc, MatchesPairwiseOracleWithTies) {
  Rng r(1);
  for (int t = 0; t < 200; ++t) {
    const int n = static_cast<int>(r.uniform_int(2, 60));
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(r.uniform_int(0, 8));
      y[static_cast<std::size_t>(i)] = r.bernoulli(0.4);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(auc(s, y), auc_pairs(s, y));
  }
}

TEST(Micro, DropsAllZeroColumnsWithWarning) {
  Mat<double> s(4, 2);
  s << 0.9, 0.1, 0.2, 0.5, 0.8, 0.3, 0.1, 0.7;
  Mat<int> y(4, 2);
  y << 1, 0, 0, 0, 1, 0, 0, 0;
  std::vector<std::string> w;
  EXPECT_EQ(micro_auc(s, y, &w), 1.0);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NE(w[0].find("label 1"), std::string::npos);
  EXPECT_EQ(micro_average_precision(s, y), 1.0);
}
