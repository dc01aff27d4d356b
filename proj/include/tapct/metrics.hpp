// SPDX-License-Identifier: Apache-2.0
//
// Segmentation overlap and ranking metrics.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "tapct/common.hpp"
#include "tapct/volcore.hpp"

namespace tapct {

/// Mean over non-background classes of 2|P&G| / (|P| + |G|). Classes absent
/// from both maps are skipped; if every class is skipped the result is 1.
double dice_macro(const LabelMap& pred, const LabelMap& gt, int n_classes);

/// Per-class Dice; NaN for classes absent from both maps (index 0 unused).
std::vector<double> dice_per_class(const LabelMap& pred, const LabelMap& gt, int n_classes);

/// Mann-Whitney AUC with ties counted as one half. Throws ValidationError
/// ("AUC undefined ...") unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Step-wise precision-recall integral over distinct score thresholds.
/// Throws ValidationError without positives.
double average_precision(std::span<const double> scores, std::span<const int> labels);

/// Micro-averaged variants over a samples x labels matrix. Label columns
/// without positives are dropped and named in `warnings`.
double micro_auc(const Mat<double>& scores, const Mat<int>& labels,
                 std::vector<std::string>* warnings = nullptr);
double micro_average_precision(const Mat<double>& scores, const Mat<int>& labels,
                               std::vector<std::string>* warnings = nullptr);

}  // namespace tapct
