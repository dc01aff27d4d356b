// SPDX-License-Identifier: Apache-2.0
//
// Pretraining loop: multi-crop batches, student/teacher forward passes,
// the combined objective, AdamW with layerwise decay, EMA teacher, centers
// and collapse monitoring.

#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapct/config.hpp"
#include "tapct/masking.hpp"
#include "tapct/params.hpp"
#include "tapct/ssl.hpp"
#include "tapct/views.hpp"
#include "tapct/vit3d.hpp"
#include "tapct/volcore.hpp"

namespace tapct {

struct LossWeights {
  double dino = 1.0;
  double ibot = 1.0;
  double koleo = 0.1;
};

struct TrainConfig {
  std::string preset = "desk";
  ModelPreset model = model_preset("desk");
  HeadConfig head{1024, 256, 3, 64, false};
  MaskSpec mask;
  AugSpec aug;
  ScheduleConfig sched;
  LossWeights loss;
  int n_local = 8;

  std::int64_t total_iterations = 2000;
  int batch_size = 8;
  int grad_accum_steps = 1;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 1;
  bool deterministic = false;

  double student_temp = 0.1;
  double center_momentum = 0.9;
  double koleo_eps = 1e-8;
  double grad_clip = 3.0;
  double layerwise_decay = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::string data_root;
  /// auto: foreground statistics of the training set; ct: reference CT
  /// statistics; fixed: `norm` as given.
  std::string norm_mode = "auto";
  NormStats norm;
  double fg_threshold = -800.0;
  int metrics_ring = 256;

  void validate() const;
  /// Applies preset, then every recognized key; unknown keys are rejected.
  static TrainConfig from_config(const Config& cfg);
  /// Fully resolved key=value echo; from_config(to_config()) reproduces *this.
  [[nodiscard]] Config to_config() const;
  static const std::set<std::string>& known_keys();
};

struct StepMetrics {
  std::int64_t iter = 0;
  double loss_total = 0.0;
  double loss_dino = 0.0;
  double loss_ibot = 0.0;
  double loss_koleo = 0.0;
  double lr = 0.0;
  double wd = 0.0;
  double momentum = 0.0;
  double teacher_temp = 0.0;
  double grad_norm = 0.0;
  double teacher_entropy = 0.0;
  double prototype_usage = 0.0;
  bool collapse_warning = false;

  [[nodiscard]] nlohmann::json to_json() const;
  static StepMetrics from_json(const nlohmann::json& j);
  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

struct CollapseReport {
  double entropy = 0.0;
  double usage = 0.0;
  double threshold = 0.0;
  bool warning = false;
};

/// Tracks teacher-target entropy; warns once entropy stayed below
/// 0.1 ln K for `patience` consecutive observations.
class CollapseMonitor {
 public:
  explicit CollapseMonitor(int patience = 3) : patience_(patience) {}
  /// `probs` are teacher targets (rows sum to one).
  template <typename T>
  CollapseReport observe(const Mat<T>& probs);
  CollapseReport observe(double entropy, double usage, int k);

  [[nodiscard]] int low_streak() const { return streak_; }
  void set_low_streak(int s) { streak_ = s; }

 private:
  int patience_;
  int streak_ = 0;
};

/// Backbone plus untied (or tied) projection heads over one ParamLayout.
template <typename T>
class SslModel {
 public:
  SslModel(const ViTConfig& vit, const HeadConfig& head);

  [[nodiscard]] const ParamLayout& layout() const { return layout_; }
  [[nodiscard]] const VisionTransformer<T>& backbone() const { return vit_; }
  [[nodiscard]] const DinoHead<T>& dino_head() const { return dino_; }
  [[nodiscard]] const DinoHead<T>& ibot_head() const { return ibot_ ? *ibot_ : dino_; }

 private:
  ParamLayout layout_;
  VisionTransformer<T> vit_;
  DinoHead<T> dino_;
  std::optional<DinoHead<T>> ibot_;
};

/// Initial student (and teacher) parameters for `seed`.
template <typename T>
ParamVec<T> initial_params(const ParamLayout& layout, std::uint64_t seed);

template <typename T>
struct TrainState {
  ParamVec<T> student, teacher, adam_m, adam_v;
  Center<T> center_dino, center_ibot;
  std::int64_t iteration = 0;
  int monitor_streak = 0;
  NormStats norm;
  std::deque<StepMetrics> history;
};

/// Per-sample inputs for one iteration slot, derived from (seed, iteration, slot).
struct SampleDraw {
  std::size_t volume = 0;
  MultiCrop crops;
  std::vector<MaskPlan> masks;
  std::uint64_t drop_seed = 0;
};

SampleDraw draw_sample(const TrainConfig& cfg, std::span<const Volume> volumes,
                       std::int64_t iteration, std::int64_t slot);

template <typename T>
class Trainer {
 public:
  /// `volumes` must already be normalized with `norm`.
  Trainer(TrainConfig cfg, std::vector<Volume> volumes, const NormStats& norm);

  [[nodiscard]] const TrainConfig& config() const { return cfg_; }
  [[nodiscard]] const SslModel<T>& model() const { return model_; }
  [[nodiscard]] const TrainState<T>& state() const { return state_; }
  TrainState<T>& mutable_state() { return state_; }
  [[nodiscard]] bool done() const { return state_.iteration >= cfg_.total_iterations; }

  /// One optimizer step. Throws RuntimeFailure on a non-finite loss or gradient.
  StepMetrics step();

  /// Loss and gradient of one micro-batch without touching the state; the
  /// gradient is accumulated into `grads` scaled by `scale`.
  struct MicroResult {
    double dino = 0.0, ibot = 0.0, koleo = 0.0;
    Mat<T> teacher_dino_logits;
    Mat<T> teacher_ibot_logits;
    Mat<T> teacher_probs;
  };
  MicroResult micro_batch(std::int64_t iteration, int micro, double teacher_temp, double scale,
                          ParamVec<T>& grads) const;

  /// Clipping, AdamW and the EMA teacher for an accumulated gradient;
  /// advances the iteration and returns the pre-clip gradient norm.
  double apply_update(ParamVec<T>& grads, const ScheduleState& sched);

 private:
  TrainConfig cfg_;
  std::vector<Volume> volumes_;
  SslModel<T> model_;
  TrainState<T> state_;
  ParamVec<T> lr_scale_, wd_mask_;
  CollapseMonitor monitor_;
};

/// Global-norm clipping; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::span<T> grads, double max_norm);

/// Loads every f32le container in data_root, in sorted order.
std::vector<Volume> load_training_volumes(const std::filesystem::path& root);
NormStats resolve_norm(const TrainConfig& cfg, std::span<const Volume> raw);

struct PretrainResult {
  std::filesystem::path checkpoint;
  std::vector<StepMetrics> metrics;
};

/// Full run: loads data (or resumes), trains to total_iterations, writes
/// metrics.jsonl, periodic checkpoints and final.tapckpt into `out_dir`.
PretrainResult pretrain(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& resume = std::nullopt,
                        const std::function<void(const StepMetrics&)>& on_step = {});

/// Same as pretrain() but with volumes supplied by the caller (raw intensities).
PretrainResult pretrain_on(const TrainConfig& cfg, std::vector<Volume> raw,
                           const std::filesystem::path& out_dir,
                           const std::optional<std::filesystem::path>& resume = std::nullopt,
                           const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace tapct
