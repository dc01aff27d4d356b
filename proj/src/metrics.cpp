// SPDX-License-Identifier: Apache-2.0

#include "tapct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

namespace tapct {

namespace {

struct Overlap {
  std::vector<std::int64_t> pred, gt, both;
};

Overlap count_overlap(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  if (!(pred.shape() == gt.shape())) {
    throw ValidationError("prediction shape " + to_string(pred.shape()) + " does not match reference " +
                          to_string(gt.shape()));
  }
  if (n_classes < 2) throw ValidationError("Dice needs at least two classes");
  const auto n = static_cast<std::size_t>(n_classes);
  Overlap o{std::vector<std::int64_t>(n, 0), std::vector<std::int64_t>(n, 0), std::vector<std::int64_t>(n, 0)};
  const auto& p = pred.labels.values();
  const auto& g = gt.labels.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pin = p[i] < n_classes;
    const bool gin = g[i] < n_classes;
    if (pin) ++o.pred[p[i]];
    if (gin) ++o.gt[g[i]];
    if (pin && p[i] == g[i]) ++o.both[p[i]];
  }
  return o;
}

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw ValidationError("non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
}

// Flattened scores/labels of the label columns that have positives.
void flatten(const Mat<double>& scores, const Mat<int>& labels, std::vector<double>& s, std::vector<int>& l,
             std::vector<std::string>* warnings) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw ValidationError("score and label matrices differ in shape");
  }
  for (Eigen::Index j = 0; j < labels.cols(); ++j) {
    if (labels.col(j).sum() == 0) {
      if (warnings) warnings->push_back("label " + std::to_string(j) + " has no positives and was dropped");
      continue;
    }
    for (Eigen::Index i = 0; i < labels.rows(); ++i) {
      s.push_back(scores(i, j));
      l.push_back(labels(i, j));
    }
  }
}

}  // namespace

std::vector<double> dice_per_class(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  const Overlap o = count_overlap(pred, gt, n_classes);
  std::vector<double> d(static_cast<std::size_t>(n_classes), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 1; c < d.size(); ++c) {
    const std::int64_t denom = o.pred[c] + o.gt[c];
    if (denom > 0) d[c] = 2.0 * static_cast<double>(o.both[c]) / static_cast<double>(denom);
  }
  return d;
}

double dice_macro(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  const auto d = dice_per_class(pred, gt, n_classes);
  double sum = 0.0;
  int n = 0;
  for (std::size_t c = 1; c < d.size(); ++c) {
    if (std::isnan(d[c])) continue;
    sum += d[c];
    ++n;
  }
  return n == 0 ? 1.0 : sum / n;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const auto n_pos = static_cast<std::int64_t>(std::count(labels.begin(), labels.end(), 1));
  const auto n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ValidationError("AUC undefined: labels contain a single class");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum of positives, with tie groups at their mid rank.
  std::int64_t twice_rank = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const auto twice_mid = static_cast<std::int64_t>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) twice_rank += twice_mid;
    i = j + 1;
  }
  const std::int64_t num = twice_rank - n_pos * (n_pos + 1);
  return static_cast<double>(num) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const auto n_pos = static_cast<std::int64_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw ValidationError("average precision undefined: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  double prev_recall = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++tp; else ++fp;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double micro_auc(const Mat<double>& scores, const Mat<int>& labels, std::vector<std::string>* warnings) {
  std::vector<double> s;
  std::vector<int> l;
  flatten(scores, labels, s, l, warnings);
  return auc(s, l);
}

double micro_average_precision(const Mat<double>& scores, const Mat<int>& labels,
                               std::vector<std::string>* warnings) {
  std::vector<double> s;
  std::vector<int> l;
  flatten(scores, labels, s, l, warnings);
  return average_precision(s, l);
}

}  // namespace tapct
