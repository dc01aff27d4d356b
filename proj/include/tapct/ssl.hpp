// SPDX-License-Identifier: Apache-2.0
//
// Self-distillation objectives: projection heads, the image-level and
// masked-token cross-entropies against a centered, sharpened teacher, the
// KoLeo spreading term, the momentum teacher and the training schedules.
//
// Logit matrices are row-per-sample (or row-per-token) and K columns wide.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tapct/common.hpp"
#include "tapct/params.hpp"

namespace tapct {

struct HeadConfig {
  int prototypes = 65536;
  int hidden = 2048;
  int layers = 3;
  int bottleneck = 256;
  bool tied = false;

  void validate() const;
};

template <typename T>
struct HeadCache {
  std::vector<Mat<T>> inputs;  // input of every MLP layer
  std::vector<Mat<T>> pre;     // pre-activation of every hidden layer
  Mat<T> z;                    // bottleneck output
  Vec<T> z_norm;
  Mat<T> zn;                   // L2-normalized bottleneck
  Mat<T> w_hat;                // row-normalized prototypes
  Vec<T> v_norm;
};

/// MLP -> bottleneck -> L2 normalize -> weight-normalized prototype layer.
template <typename T>
class DinoHead {
 public:
  DinoHead(const HeadConfig& cfg, int in_dim, ParamLayout& layout, const std::string& prefix,
           int layer_id);

  [[nodiscard]] const HeadConfig& config() const { return cfg_; }
  [[nodiscard]] int in_dim() const { return in_dim_; }

  Mat<T> forward(const Mat<T>& x, std::span<const T> params, HeadCache<T>* cache = nullptr) const;
  /// Accumulates parameter gradients and returns d(loss)/d(x).
  Mat<T> backward(const Mat<T>& dlogits, const HeadCache<T>& cache, std::span<const T> params,
                  std::span<T> grads) const;

  /// Parameter slice of the prototype matrix (K x bottleneck).
  [[nodiscard]] const ParamRef& prototypes() const { return last_; }

 private:
  HeadConfig cfg_;
  int in_dim_;
  std::vector<ParamRef> w_, b_;
  ParamRef last_;
};

/// softmax((t - center) / temp) per row.
template <typename T>
Mat<T> teacher_softmax(const Mat<T>& teacher_logits, const RowVec<T>& center, double temp);

/// Cross-entropy between teacher probabilities for every global view i and
/// student logits for every view j != i (globals are student views 0 and 1),
/// averaged over pairs and rows. Writes d(loss)/d(student logits) if `grads`.
template <typename T>
double dino_loss(const std::vector<Mat<T>>& student_logits, const std::vector<Mat<T>>& teacher_probs,
                 double student_temp, std::vector<Mat<T>>* grads = nullptr);

/// Convenience form that centers and sharpens raw teacher logits first.
template <typename T>
double dino_loss(const std::vector<Mat<T>>& student_logits,
                 const std::vector<Mat<T>>& teacher_logits, const RowVec<T>& center,
                 double student_temp, double teacher_temp, std::vector<Mat<T>>* grads = nullptr);

/// Masked-token cross-entropy. Entry v holds the masked-token rows of one
/// (sample, global view); its mean over tokens is averaged over all entries,
/// and entries without masked tokens contribute zero.
template <typename T>
double ibot_loss(const std::vector<Mat<T>>& student_logits, const std::vector<Mat<T>>& teacher_probs,
                 double student_temp, std::vector<Mat<T>>* grads = nullptr);

/// -(1/n) sum ln(d_i + eps) with d_i the distance from L2-normalized row i to
/// its nearest other row (largest inner product, lowest index on ties).
template <typename T>
double koleo_loss(const Mat<T>& x, double eps, Mat<T>* grad = nullptr);

/// Mean Shannon entropy (nats) of the rows of a probability matrix.
template <typename T>
double mean_entropy(const Mat<T>& probs);

/// teacher <- m * teacher + (1 - m) * student, element-wise.
template <typename T>
void update_teacher(std::span<const T> student, std::span<T> teacher, double m);

template <typename T>
struct Center {
  RowVec<T> value;
  double momentum = 0.9;

  Center() = default;
  Center(int k, double m) : value(RowVec<T>::Zero(k)), momentum(m) {}
  /// value <- m * value + (1 - m) * column mean of `teacher_logits`.
  void update(const Mat<T>& teacher_logits);
};

struct ScheduleConfig {
  double base_lr = 0.0035;
  double batch_scale = 1.0;
  double lr_min_ratio = 1e-2;
  double warmup_frac = 0.2;
  std::pair<double, double> wd{0.04, 0.4};
  std::pair<double, double> momentum{0.992, 1.0};
  std::pair<double, double> teacher_temp{0.04, 0.07};
  double temp_warmup_frac = 0.3;

  void validate() const;
};

struct ScheduleState {
  double lr = 0.0;
  double weight_decay = 0.0;
  double teacher_momentum = 0.0;
  double teacher_temp = 0.0;
  std::int64_t iteration = 0;
  std::int64_t total = 0;
};

/// Linear lr warmup to base_lr * batch_scale then cosine to lr_min; cosine
/// weight decay and teacher momentum over the run; linear teacher-temperature
/// warmup then constant.
ScheduleState schedules(std::int64_t iteration, std::int64_t total, const ScheduleConfig& cfg);

}  // namespace tapct
