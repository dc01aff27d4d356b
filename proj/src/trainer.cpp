// SPDX-License-Identifier: Apache-2.0

#include "tapct/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tapct/checkpoint.hpp"

namespace tapct {

namespace {

constexpr std::uint64_t kInitStream = 0x1a17ULL;
constexpr std::uint64_t kSampleStream = 0x5a3bULL;

CropSpec with_extent(CropSpec c, Extent3 e) {
  c.depth = e.z;
  c.out_h = e.y;
  c.out_w = e.x;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

const std::set<std::string>& TrainConfig::known_keys() {
  static const std::set<std::string> keys = {
      "preset",
      "model.embed_dim", "model.depth_layers", "model.heads", "model.patch", "model.n_registers",
      "model.layerscale_init", "model.drop_path", "model.mlp_ratio", "model.pos_grid",
      "crop.global.size", "crop.local.size", "crop.global.scale", "crop.local.scale", "crop.aspect",
      "crop.n_local",
      "mask.prob", "mask.ratio", "mask.aspect", "mask.min_block", "mask.max_attempts",
      "aug.gamma", "aug.gamma_p_global", "aug.gamma_p_local", "aug.blur_sigma",
      "aug.blur_p_global0", "aug.blur_p_global1", "aug.blur_p_local",
      "head.prototypes", "head.hidden", "head.layers", "head.bottleneck", "head.tied",
      "loss.dino", "loss.ibot", "loss.koleo", "loss.student_temp", "loss.center_momentum",
      "loss.koleo_eps",
      "sched.base_lr", "sched.batch_scale", "sched.lr_min_ratio", "sched.warmup_frac", "sched.wd",
      "sched.momentum", "sched.teacher_temp", "sched.temp_warmup_frac",
      "clip.grad_norm", "opt.layerwise_decay", "opt.betas", "opt.eps",
      "train.iterations", "train.batch_size", "train.grad_accum", "train.seed",
      "train.checkpoint_every", "train.log_every", "train.deterministic", "train.metrics_ring",
      "data.root", "data.norm", "data.norm_stats", "data.fg_threshold",
  };
  return keys;
}

TrainConfig TrainConfig::from_config(const Config& c) {
  c.reject_unknown(known_keys());
  TrainConfig t;
  t.preset = c.get_string("preset", "desk");
  t.model = model_preset(t.preset);
  if (t.preset != "desk") {
    t.head = HeadConfig{};
    t.total_iterations = 125000;
    t.batch_size = 2048;
  }
  ViTConfig& v = t.model.vit;
  v.embed_dim = static_cast<int>(c.get_int("model.embed_dim", v.embed_dim));
  v.depth_layers = static_cast<int>(c.get_int("model.depth_layers", v.depth_layers));
  v.heads = static_cast<int>(c.get_int("model.heads", v.heads));
  v.patch = c.get_extent("model.patch", v.patch);
  v.n_registers = static_cast<int>(c.get_int("model.n_registers", v.n_registers));
  v.layerscale_init = c.get_double("model.layerscale_init", v.layerscale_init);
  v.drop_path = c.get_double("model.drop_path", v.drop_path);
  v.mlp_ratio = c.get_double("model.mlp_ratio", v.mlp_ratio);

  t.model.global = with_extent(t.model.global, c.get_extent("crop.global.size", t.model.global.view_shape()));
  t.model.local = with_extent(t.model.local, c.get_extent("crop.local.size", t.model.local.view_shape()));
  t.model.global.scale = c.get_range("crop.global.scale", t.model.global.scale);
  t.model.local.scale = c.get_range("crop.local.scale", t.model.local.scale);
  t.model.global.aspect = c.get_range("crop.aspect", t.model.global.aspect);
  t.model.local.aspect = t.model.global.aspect;
  t.n_local = static_cast<int>(c.get_int("crop.n_local", t.n_local));

  if (c.has("model.pos_grid")) {
    v.pos_grid = c.get_extent("model.pos_grid", v.pos_grid);
  } else {
    const Extent3 g = t.model.global.view_shape();
    const Extent3 p = v.patch;
    if (p.positive()) v.pos_grid = {std::max(1, g.z / p.z), std::max(1, g.y / p.y), std::max(1, g.x / p.x)};
  }

  t.mask.prob = c.get_double("mask.prob", t.mask.prob);
  t.mask.ratio = c.get_range("mask.ratio", t.mask.ratio);
  t.mask.aspect = c.get_range("mask.aspect", t.mask.aspect);
  t.mask.min_block = static_cast<int>(c.get_int("mask.min_block", t.mask.min_block));
  t.mask.max_attempts = static_cast<int>(c.get_int("mask.max_attempts", t.mask.max_attempts));

  t.aug.gamma = c.get_range("aug.gamma", t.aug.gamma);
  t.aug.gamma_p_global = c.get_double("aug.gamma_p_global", t.aug.gamma_p_global);
  t.aug.gamma_p_local = c.get_double("aug.gamma_p_local", t.aug.gamma_p_local);
  t.aug.blur_sigma = c.get_range("aug.blur_sigma", t.aug.blur_sigma);
  t.aug.blur_p_global0 = c.get_double("aug.blur_p_global0", t.aug.blur_p_global0);
  t.aug.blur_p_global1 = c.get_double("aug.blur_p_global1", t.aug.blur_p_global1);
  t.aug.blur_p_local = c.get_double("aug.blur_p_local", t.aug.blur_p_local);

  t.head.prototypes = static_cast<int>(c.get_int("head.prototypes", t.head.prototypes));
  t.head.hidden = static_cast<int>(c.get_int("head.hidden", t.head.hidden));
  t.head.layers = static_cast<int>(c.get_int("head.layers", t.head.layers));
  t.head.bottleneck = static_cast<int>(c.get_int("head.bottleneck", t.head.bottleneck));
  t.head.tied = c.get_bool("head.tied", t.head.tied);

  t.loss.dino = c.get_double("loss.dino", t.loss.dino);
  t.loss.ibot = c.get_double("loss.ibot", t.loss.ibot);
  t.loss.koleo = c.get_double("loss.koleo", t.loss.koleo);
  t.student_temp = c.get_double("loss.student_temp", t.student_temp);
  t.center_momentum = c.get_double("loss.center_momentum", t.center_momentum);
  t.koleo_eps = c.get_double("loss.koleo_eps", t.koleo_eps);

  t.total_iterations = c.get_int("train.iterations", t.total_iterations);
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
  t.grad_accum_steps = static_cast<int>(c.get_int("train.grad_accum", t.grad_accum_steps));
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<long long>(t.seed)));
  t.checkpoint_every = c.get_int("train.checkpoint_every", t.checkpoint_every);
  t.log_every = c.get_int("train.log_every", t.log_every);
  t.deterministic = c.get_bool("train.deterministic", t.deterministic);
  t.metrics_ring = static_cast<int>(c.get_int("train.metrics_ring", t.metrics_ring));

  t.sched.base_lr = c.get_double("sched.base_lr", t.sched.base_lr);
  const std::string bs = c.get_string("sched.batch_scale", "1");
  if (bs == "sqrt") {
    t.sched.batch_scale =
        std::sqrt(static_cast<double>(t.batch_size) * t.grad_accum_steps / 1024.0);
  } else {
    t.sched.batch_scale = c.get_double("sched.batch_scale", 1.0);
  }
  t.sched.lr_min_ratio = c.get_double("sched.lr_min_ratio", t.sched.lr_min_ratio);
  t.sched.warmup_frac = c.get_double("sched.warmup_frac", t.sched.warmup_frac);
  t.sched.wd = c.get_range("sched.wd", t.sched.wd);
  t.sched.momentum = c.get_range("sched.momentum", t.sched.momentum);
  t.sched.teacher_temp = c.get_range("sched.teacher_temp", t.sched.teacher_temp);
  t.sched.temp_warmup_frac = c.get_double("sched.temp_warmup_frac", t.sched.temp_warmup_frac);

  t.grad_clip = c.get_double("clip.grad_norm", t.grad_clip);
  t.layerwise_decay = c.get_double("opt.layerwise_decay", t.layerwise_decay);
  const auto betas = c.get_range("opt.betas", {t.adam_beta1, t.adam_beta2});
  t.adam_beta1 = betas.first;
  t.adam_beta2 = betas.second;
  t.adam_eps = c.get_double("opt.eps", t.adam_eps);

  t.data_root = c.get_string("data.root", t.data_root);
  t.norm_mode = c.get_string("data.norm", t.norm_mode);
  if (c.has("data.norm_stats")) {
    const auto s = c.get_doubles("data.norm_stats");
    if (s.size() != 4) throw ValidationError("data.norm_stats expects mean,std,clip_min,clip_max");
    t.norm = {s[0], s[1], s[2], s[3]};
  }
  t.fg_threshold = c.get_double("data.fg_threshold", t.fg_threshold);
  t.validate();
  return t;
}

Config TrainConfig::to_config() const {
  Config c;
  const ViTConfig& v = model.vit;
  c.set("preset", preset);
  c.set("model.embed_dim", std::to_string(v.embed_dim));
  c.set("model.depth_layers", std::to_string(v.depth_layers));
  c.set("model.heads", std::to_string(v.heads));
  c.set("model.patch", format_extent(v.patch));
  c.set("model.n_registers", std::to_string(v.n_registers));
  c.set("model.layerscale_init", format_number(v.layerscale_init));
  c.set("model.drop_path", format_number(v.drop_path));
  c.set("model.mlp_ratio", format_number(v.mlp_ratio));
  c.set("model.pos_grid", format_extent(v.pos_grid));
  c.set("crop.global.size", format_extent(model.global.view_shape()));
  c.set("crop.local.size", format_extent(model.local.view_shape()));
  c.set("crop.global.scale", format_range(model.global.scale));
  c.set("crop.local.scale", format_range(model.local.scale));
  c.set("crop.aspect", format_range(model.global.aspect));
  c.set("crop.n_local", std::to_string(n_local));
  c.set("mask.prob", format_number(mask.prob));
  c.set("mask.ratio", format_range(mask.ratio));
  c.set("mask.aspect", format_range(mask.aspect));
  c.set("mask.min_block", std::to_string(mask.min_block));
  c.set("mask.max_attempts", std::to_string(mask.max_attempts));
  c.set("aug.gamma", format_range(aug.gamma));
  c.set("aug.gamma_p_global", format_number(aug.gamma_p_global));
  c.set("aug.gamma_p_local", format_number(aug.gamma_p_local));
  c.set("aug.blur_sigma", format_range(aug.blur_sigma));
  c.set("aug.blur_p_global0", format_number(aug.blur_p_global0));
  c.set("aug.blur_p_global1", format_number(aug.blur_p_global1));
  c.set("aug.blur_p_local", format_number(aug.blur_p_local));
  c.set("head.prototypes", std::to_string(head.prototypes));
  c.set("head.hidden", std::to_string(head.hidden));
  c.set("head.layers", std::to_string(head.layers));
  c.set("head.bottleneck", std::to_string(head.bottleneck));
  c.set("head.tied", head.tied ? "true" : "false");
  c.set("loss.dino", format_number(loss.dino));
  c.set("loss.ibot", format_number(loss.ibot));
  c.set("loss.koleo", format_number(loss.koleo));
  c.set("loss.student_temp", format_number(student_temp));
  c.set("loss.center_momentum", format_number(center_momentum));
  c.set("loss.koleo_eps", format_number(koleo_eps));
  c.set("sched.base_lr", format_number(sched.base_lr));
  c.set("sched.batch_scale", format_number(sched.batch_scale));
  c.set("sched.lr_min_ratio", format_number(sched.lr_min_ratio));
  c.set("sched.warmup_frac", format_number(sched.warmup_frac));
  c.set("sched.wd", format_range(sched.wd));
  c.set("sched.momentum", format_range(sched.momentum));
  c.set("sched.teacher_temp", format_range(sched.teacher_temp));
  c.set("sched.temp_warmup_frac", format_number(sched.temp_warmup_frac));
  c.set("clip.grad_norm", format_number(grad_clip));
  c.set("opt.layerwise_decay", format_number(layerwise_decay));
  c.set("opt.betas", format_range({adam_beta1, adam_beta2}));
  c.set("opt.eps", format_number(adam_eps));
  c.set("train.iterations", std::to_string(total_iterations));
  c.set("train.batch_size", std::to_string(batch_size));
  c.set("train.grad_accum", std::to_string(grad_accum_steps));
  c.set("train.seed", std::to_string(seed));
  c.set("train.checkpoint_every", std::to_string(checkpoint_every));
  c.set("train.log_every", std::to_string(log_every));
  c.set("train.deterministic", deterministic ? "true" : "false");
  c.set("train.metrics_ring", std::to_string(metrics_ring));
  c.set("data.root", data_root);
  c.set("data.norm", norm_mode);
  c.set("data.norm_stats", format_number(norm.mean) + "," + format_number(norm.std) + "," +
                               format_number(norm.clip_min) + "," + format_number(norm.clip_max));
  c.set("data.fg_threshold", format_number(fg_threshold));
  return c;
}

void TrainConfig::validate() const {
  model.vit.validate();
  model.global.validate();
  model.local.validate();
  head.validate();
  mask.validate();
  sched.validate();
  if (total_iterations < 1) throw ValidationError("train.iterations must be >= 1");
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (grad_accum_steps < 1) throw ValidationError("train.grad_accum must be >= 1");
  if (n_local < 0) throw ValidationError("crop.n_local must be >= 0");
  if (checkpoint_every < 0 || log_every < 0) {
    throw ValidationError("train.checkpoint_every and train.log_every must be >= 0");
  }
  if (metrics_ring < 1) throw ValidationError("train.metrics_ring must be >= 1");
  if (loss.dino < 0.0 || loss.ibot < 0.0 || loss.koleo < 0.0) {
    throw ValidationError("loss weights must be >= 0");
  }
  if (loss.koleo > 0.0 && batch_size < 2) {
    throw ValidationError("loss.koleo > 0 needs train.batch_size >= 2");
  }
  if (!(student_temp > 0.0)) throw ValidationError("loss.student_temp must be > 0");
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0)) {
    throw ValidationError("loss.center_momentum must be in [0, 1]");
  }
  if (!(grad_clip >= 0.0)) throw ValidationError("clip.grad_norm must be >= 0");
  if (!(layerwise_decay > 0.0 && layerwise_decay <= 1.0)) {
    throw ValidationError("opt.layerwise_decay must be in (0, 1]");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("opt.betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("opt.eps must be > 0");
  if (norm_mode != "auto" && norm_mode != "ct" && norm_mode != "fixed") {
    throw ValidationError("data.norm must be auto, ct or fixed");
  }
  if (norm_mode == "fixed") norm.validate();
  // Throws if a view is not divisible by the patch.
  (void)PatchGrid::of(model.global.view_shape(), model.vit.patch);
  if (n_local > 0) (void)PatchGrid::of(model.local.view_shape(), model.vit.patch);
}

// ---------------------------------------------------------------------------
// Metrics and monitoring

nlohmann::json StepMetrics::to_json() const {
  return {{"iter", iter},
          {"loss_total", loss_total},
          {"loss_dino", loss_dino},
          {"loss_ibot", loss_ibot},
          {"loss_koleo", loss_koleo},
          {"lr", lr},
          {"wd", wd},
          {"momentum", momentum},
          {"teacher_temp", teacher_temp},
          {"grad_norm", grad_norm},
          {"teacher_entropy", teacher_entropy},
          {"prototype_usage", prototype_usage},
          {"collapse_warning", collapse_warning}};
}

StepMetrics StepMetrics::from_json(const nlohmann::json& j) {
  StepMetrics m;
  m.iter = j.at("iter").get<std::int64_t>();
  m.loss_total = j.at("loss_total").get<double>();
  m.loss_dino = j.at("loss_dino").get<double>();
  m.loss_ibot = j.at("loss_ibot").get<double>();
  m.loss_koleo = j.at("loss_koleo").get<double>();
  m.lr = j.at("lr").get<double>();
  m.wd = j.at("wd").get<double>();
  m.momentum = j.at("momentum").get<double>();
  m.teacher_temp = j.at("teacher_temp").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.teacher_entropy = j.at("teacher_entropy").get<double>();
  m.prototype_usage = j.value("prototype_usage", 0.0);
  m.collapse_warning = j.value("collapse_warning", false);
  return m;
}

CollapseReport CollapseMonitor::observe(double entropy, double usage, int k) {
  CollapseReport r;
  r.entropy = entropy;
  r.usage = usage;
  r.threshold = 0.1 * std::log(static_cast<double>(k));
  streak_ = entropy < r.threshold ? streak_ + 1 : 0;
  r.warning = streak_ >= patience_;
  return r;
}

template <typename T>
CollapseReport CollapseMonitor::observe(const Mat<T>& probs) {
  const auto k = static_cast<int>(probs.cols());
  double usage = 0.0;
  if (probs.rows() > 0) {
    const RowVec<T> mean = probs.colwise().mean();
    const double floor = 1.0 / (10.0 * k);
    Eigen::Index used = 0;
    for (Eigen::Index i = 0; i < mean.size(); ++i) used += static_cast<double>(mean(i)) > floor;
    usage = static_cast<double>(used) / k;
  }
  return observe(mean_entropy(probs), usage, k);
}

template CollapseReport CollapseMonitor::observe<float>(const Mat<float>&);
template CollapseReport CollapseMonitor::observe<double>(const Mat<double>&);

// ---------------------------------------------------------------------------
// Model and data

template <typename T>
SslModel<T>::SslModel(const ViTConfig& vit, const HeadConfig& head)
    : vit_(vit, layout_),
      dino_(head, vit.embed_dim, layout_, "dino_head", vit.depth_layers + 1) {
  if (!head.tied) ibot_.emplace(head, vit.embed_dim, layout_, "ibot_head", vit.depth_layers + 1);
}

template <typename T>
ParamVec<T> initial_params(const ParamLayout& layout, std::uint64_t seed) {
  ParamVec<T> p(layout.total());
  Rng rng = Rng::derive(seed, {kInitStream});
  init_params<T>(layout, p, rng);
  return p;
}

SampleDraw draw_sample(const TrainConfig& cfg, std::span<const Volume> volumes,
                       std::int64_t iteration, std::int64_t slot) {
  if (volumes.empty()) throw ValidationError("no training volumes");
  Rng rng = Rng::derive(cfg.seed, {kSampleStream, static_cast<std::uint64_t>(iteration),
                                   static_cast<std::uint64_t>(slot)});
  SampleDraw d;
  d.volume = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(volumes.size()) - 1));
  Rng crop_rng(rng.next_u64());
  d.crops = make_multicrop(volumes[d.volume], cfg.model.global, cfg.model.local, cfg.n_local,
                           cfg.aug, crop_rng);
  for (const auto& g : d.crops.globals) {
    d.masks.push_back(plan_masks(PatchGrid::of(g.data.shape(), cfg.model.vit.patch), cfg.mask, rng));
  }
  d.drop_seed = rng.next_u64();
  return d;
}

std::vector<Volume> load_training_volumes(const std::filesystem::path& root) {
  if (root.empty()) throw ValidationError("data.root is not set");
  if (!std::filesystem::is_directory(root)) {
    throw ValidationError("data root " + root.string() + " is not a directory");
  }
  std::vector<Volume> out;
  for (const auto& p : list_containers(root, "f32le")) out.push_back(load_volume(p));
  if (out.empty()) throw ValidationError("no f32le volumes found in " + root.string());
  return out;
}

NormStats resolve_norm(const TrainConfig& cfg, std::span<const Volume> raw) {
  if (cfg.norm_mode == "ct") return NormStats::ct_reference();
  if (cfg.norm_mode == "fixed") return cfg.norm;
  return compute_foreground_stats(raw, cfg.fg_threshold);
}

template <typename T>
double clip_grad_norm(std::span<T> grads, double max_norm) {
  const double norm = l2_norm<T>(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const T coef = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto& g : grads) g *= coef;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Trainer

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, std::vector<Volume> volumes, const NormStats& norm)
    : cfg_(std::move(cfg)), volumes_(std::move(volumes)), model_(cfg_.model.vit, cfg_.head) {
  cfg_.validate();
  if (volumes_.empty()) throw ValidationError("no training volumes");
  const ParamLayout& layout = model_.layout();
  state_.student = initial_params<T>(layout, cfg_.seed);
  state_.teacher = state_.student;
  state_.adam_m.assign(layout.total(), T(0));
  state_.adam_v.assign(layout.total(), T(0));
  state_.center_dino = Center<T>(cfg_.head.prototypes, cfg_.center_momentum);
  state_.center_ibot = Center<T>(cfg_.head.prototypes, cfg_.center_momentum);
  state_.norm = norm;
  lr_scale_ = layerwise_lr_scale<T>(layout, cfg_.layerwise_decay);
  wd_mask_ = weight_decay_mask<T>(layout);
}

template <typename T>
typename Trainer<T>::MicroResult Trainer<T>::micro_batch(std::int64_t iteration, int micro,
                                                         double teacher_temp, double scale,
                                                         ParamVec<T>& grads) const {
  const int B = cfg_.batch_size;
  const int n_views = 2 + cfg_.n_local;
  const int E = cfg_.model.vit.embed_dim;
  const int R = cfg_.model.vit.n_registers;
  const int K = cfg_.head.prototypes;
  const auto& vit = model_.backbone();
  const std::span<const T> ps(state_.student);
  const std::span<const T> pt(state_.teacher);
  const std::span<T> g(grads);

  std::vector<SampleDraw> draws(static_cast<std::size_t>(B));
  std::vector<std::vector<VitCache<T>>> caches(static_cast<std::size_t>(B));
  std::vector<std::vector<EncoderOutput<T>>> s_out(static_cast<std::size_t>(B));
  std::vector<std::vector<EncoderOutput<T>>> t_out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    draws[bi] = draw_sample(cfg_, volumes_, iteration, static_cast<std::int64_t>(micro) * B + b);
    const SampleDraw& d = draws[bi];
    Rng drop(d.drop_seed);
    caches[bi].resize(static_cast<std::size_t>(n_views));
    for (int v = 0; v < 2; ++v) {
      t_out[bi].push_back(vit.forward(d.crops.globals[static_cast<std::size_t>(v)].data, pt));
    }
    for (int v = 0; v < n_views; ++v) {
      const auto vi = static_cast<std::size_t>(v);
      const View& view = v < 2 ? d.crops.globals[vi] : d.crops.locals[vi - 2];
      const MaskPlan* mask = v < 2 ? &d.masks[vi] : nullptr;
      s_out[bi].push_back(vit.forward(view.data, ps, mask, &drop, &caches[bi][vi]));
    }
  }

  MicroResult res;
  const T w_scale_dino = static_cast<T>(cfg_.loss.dino * scale);
  const T w_scale_ibot = static_cast<T>(cfg_.loss.ibot * scale);
  const T w_scale_koleo = static_cast<T>(cfg_.loss.koleo * scale);

  // Image-level objective on CLS tokens.
  Mat<T> s_cls(static_cast<Eigen::Index>(n_views) * B, E);
  Mat<T> t_cls(2 * static_cast<Eigen::Index>(B), E);
  for (int v = 0; v < n_views; ++v)
    for (int b = 0; b < B; ++b) {
      s_cls.row(static_cast<Eigen::Index>(v) * B + b) = s_out[static_cast<std::size_t>(b)][static_cast<std::size_t>(v)].cls();
      if (v < 2) t_cls.row(static_cast<Eigen::Index>(v) * B + b) = t_out[static_cast<std::size_t>(b)][static_cast<std::size_t>(v)].cls();
    }
  HeadCache<T> dino_cache;
  const Mat<T> s_logits = model_.dino_head().forward(s_cls, ps, &dino_cache);
  res.teacher_dino_logits = model_.dino_head().forward(t_cls, pt);
  std::vector<Mat<T>> s_views, t_probs;
  for (int v = 0; v < n_views; ++v) s_views.push_back(s_logits.middleRows(static_cast<Eigen::Index>(v) * B, B));
  for (int v = 0; v < 2; ++v) {
    t_probs.push_back(teacher_softmax<T>(res.teacher_dino_logits.middleRows(static_cast<Eigen::Index>(v) * B, B),
                                         state_.center_dino.value, teacher_temp));
  }
  res.teacher_probs.resize(2 * static_cast<Eigen::Index>(B), K);
  res.teacher_probs << t_probs[0], t_probs[1];
  std::vector<Mat<T>> d_views;
  res.dino = dino_loss<T>(s_views, t_probs, cfg_.student_temp, &d_views);
  Mat<T> d_cls = Mat<T>::Zero(s_cls.rows(), E);
  if (cfg_.loss.dino > 0.0) {
    Mat<T> d_logits(s_logits.rows(), K);
    for (int v = 0; v < n_views; ++v) {
      d_logits.middleRows(static_cast<Eigen::Index>(v) * B, B) = d_views[static_cast<std::size_t>(v)] * w_scale_dino;
    }
    d_cls = model_.dino_head().backward(d_logits, dino_cache, ps, g);
  }

  // Masked-token objective on the global views.
  std::vector<std::vector<int>> masked(2 * static_cast<std::size_t>(B));
  Eigen::Index total_masked = 0;
  for (int b = 0; b < B; ++b)
    for (int v = 0; v < 2; ++v) {
      auto& m = masked[static_cast<std::size_t>(b) * 2 + static_cast<std::size_t>(v)];
      m = draws[static_cast<std::size_t>(b)].masks[static_cast<std::size_t>(v)].masked_indices();
      total_masked += static_cast<Eigen::Index>(m.size());
    }
  Mat<T> d_tok;
  res.teacher_ibot_logits.resize(0, K);
  if (total_masked > 0) {
    Mat<T> s_tok(total_masked, E), t_tok(total_masked, E);
    Eigen::Index r = 0;
    for (int b = 0; b < B; ++b)
      for (int v = 0; v < 2; ++v) {
        const auto& sp = s_out[static_cast<std::size_t>(b)][static_cast<std::size_t>(v)];
        const auto& tp = t_out[static_cast<std::size_t>(b)][static_cast<std::size_t>(v)];
        for (int idx : masked[static_cast<std::size_t>(b) * 2 + static_cast<std::size_t>(v)]) {
          s_tok.row(r) = sp.tokens.row(1 + R + idx);
          t_tok.row(r) = tp.tokens.row(1 + R + idx);
          ++r;
        }
      }
    HeadCache<T> ibot_cache;
    const Mat<T> s_il = model_.ibot_head().forward(s_tok, ps, &ibot_cache);
    res.teacher_ibot_logits = model_.ibot_head().forward(t_tok, pt);
    const Mat<T> t_ip = teacher_softmax<T>(res.teacher_ibot_logits, state_.center_ibot.value, teacher_temp);
    std::vector<Mat<T>> s_e, t_e;
    Eigen::Index off = 0;
    for (const auto& m : masked) {
      const auto n = static_cast<Eigen::Index>(m.size());
      s_e.push_back(s_il.middleRows(off, n));
      t_e.push_back(t_ip.middleRows(off, n));
      off += n;
    }
    std::vector<Mat<T>> d_e;
    res.ibot = ibot_loss<T>(s_e, t_e, cfg_.student_temp, &d_e);
    if (cfg_.loss.ibot > 0.0) {
      Mat<T> d_il(total_masked, K);
      off = 0;
      for (const auto& d : d_e) {
        d_il.middleRows(off, d.rows()) = d * w_scale_ibot;
        off += d.rows();
      }
      d_tok = model_.ibot_head().backward(d_il, ibot_cache, ps, g);
    }
  }

  // Spreading term on the student's global CLS embeddings, per global view.
  if (B >= 2) {
    for (int v = 0; v < 2; ++v) {
      Mat<T> gk;
      const Mat<T> x = s_cls.middleRows(static_cast<Eigen::Index>(v) * B, B);
      res.koleo += koleo_loss<T>(x, cfg_.koleo_eps, cfg_.loss.koleo > 0.0 ? &gk : nullptr);
      if (cfg_.loss.koleo > 0.0) d_cls.middleRows(static_cast<Eigen::Index>(v) * B, B) += gk * w_scale_koleo;
    }
  }

  // Backbone backward, view by view.
  Eigen::Index tok_off = 0;
  for (int b = 0; b < B; ++b) {
    for (int v = 0; v < n_views; ++v) {
      const auto bi = static_cast<std::size_t>(b);
      const auto vi = static_cast<std::size_t>(v);
      const auto& out = s_out[bi][vi];
      Mat<T> gt = Mat<T>::Zero(out.tokens.rows(), E);
      gt.row(0) = d_cls.row(static_cast<Eigen::Index>(v) * B + b);
      if (v < 2 && d_tok.rows() > 0) {
        for (int idx : masked[bi * 2 + vi]) gt.row(1 + R + idx) += d_tok.row(tok_off++);
      } else if (v < 2) {
        tok_off += static_cast<Eigen::Index>(masked[bi * 2 + vi].size());
      }
      vit.backward(gt, caches[bi][vi], ps, g);
    }
  }
  return res;
}

template <typename T>
double Trainer<T>::apply_update(ParamVec<T>& grads, const ScheduleState& sched) {
  const double norm = clip_grad_norm<T>(grads, cfg_.grad_clip);
  const double t = static_cast<double>(state_.iteration + 1);
  const double b1 = cfg_.adam_beta1;
  const double b2 = cfg_.adam_beta2;
  const T bc1 = static_cast<T>(1.0 - std::pow(b1, t));
  const T bc2_sqrt = static_cast<T>(std::sqrt(1.0 - std::pow(b2, t)));
  const T lr = static_cast<T>(sched.lr);
  const T wd = static_cast<T>(sched.weight_decay);
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  const T eps = static_cast<T>(cfg_.adam_eps);
  auto& p = state_.student;
  auto& m = state_.adam_m;
  auto& v = state_.adam_v;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T lr_i = lr * lr_scale_[i];
    p[i] *= T(1) - lr_i * wd * wd_mask_[i];
    m[i] = tb1 * m[i] + (T(1) - tb1) * grads[i];
    v[i] = tb2 * v[i] + (T(1) - tb2) * grads[i] * grads[i];
    const T denom = std::sqrt(v[i]) / bc2_sqrt + eps;
    p[i] -= (lr_i / bc1) * m[i] / denom;
  }
  update_teacher<T>(state_.student, state_.teacher, sched.teacher_momentum);
  ++state_.iteration;
  return norm;
}

template <typename T>
StepMetrics Trainer<T>::step() {
  if (done()) throw ValidationError("training already reached train.iterations");
  const std::int64_t it = state_.iteration;
  const ScheduleState sched = schedules(it, cfg_.total_iterations, cfg_.sched);
  ParamVec<T> grads(state_.student.size(), T(0));
  const int accum = cfg_.grad_accum_steps;
  double dino = 0.0, ibot = 0.0, koleo = 0.0;
  std::vector<Mat<T>> t_dino, t_ibot, t_probs;
  for (int a = 0; a < accum; ++a) {
    MicroResult r = micro_batch(it, a, sched.teacher_temp, 1.0 / accum, grads);
    dino += r.dino / accum;
    ibot += r.ibot / accum;
    koleo += r.koleo / accum;
    t_dino.push_back(std::move(r.teacher_dino_logits));
    t_ibot.push_back(std::move(r.teacher_ibot_logits));
    t_probs.push_back(std::move(r.teacher_probs));
  }
  StepMetrics m;
  m.iter = it;
  m.loss_dino = dino;
  m.loss_ibot = ibot;
  m.loss_koleo = koleo;
  m.loss_total = cfg_.loss.dino * dino + cfg_.loss.ibot * ibot + cfg_.loss.koleo * koleo;
  m.lr = sched.lr;
  m.wd = sched.weight_decay;
  m.momentum = sched.teacher_momentum;
  m.teacher_temp = sched.teacher_temp;

  const auto diagnostic = [&](double grad_norm) {
    std::ostringstream os;
    os << "non-finite training state at iteration " << it << ": loss_total=" << m.loss_total
       << " loss_dino=" << dino << " loss_ibot=" << ibot << " loss_koleo=" << koleo
       << " grad_norm=" << grad_norm;
    return os.str();
  };
  if (!std::isfinite(m.loss_total)) throw RuntimeFailure(diagnostic(l2_norm<T>(grads)));

  const auto stack = [](const std::vector<Mat<T>>& parts) {
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.rows();
    Mat<T> out(rows, parts.empty() ? 0 : parts.front().cols());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      out.middleRows(r, p.rows()) = p;
      r += p.rows();
    }
    return out;
  };
  const Mat<T> probs = stack(t_probs);
  monitor_.set_low_streak(state_.monitor_streak);
  const CollapseReport report = monitor_.observe(probs);
  state_.monitor_streak = monitor_.low_streak();
  m.teacher_entropy = report.entropy;
  m.prototype_usage = report.usage;
  m.collapse_warning = report.warning;

  const double pre_norm = l2_norm<T>(grads);
  if (!std::isfinite(pre_norm)) throw RuntimeFailure(diagnostic(pre_norm));
  m.grad_norm = apply_update(grads, sched);
  state_.center_dino.update(stack(t_dino));
  const Mat<T> ti = stack(t_ibot);
  if (ti.rows() > 0) state_.center_ibot.update(ti);

  state_.history.push_back(m);
  while (static_cast<int>(state_.history.size()) > cfg_.metrics_ring) state_.history.pop_front();
  return m;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

template <typename T>
PretrainResult run_training(const TrainConfig& cfg, std::vector<Volume> normalized,
                            const NormStats& norm, const std::filesystem::path& out_dir,
                            const std::optional<Archive>& resume,
                            const std::function<void(const StepMetrics&)>& on_step) {
  Trainer<T> trainer(cfg, std::move(normalized), norm);
  if (resume) trainer.mutable_state() = load_checkpoint_state<T>(*resume, trainer.model().layout());
  std::filesystem::create_directories(out_dir);
  const auto metrics_path = out_dir / "metrics.jsonl";
  std::ofstream log(metrics_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + metrics_path.string());

  PretrainResult result;
  bool warned = false;
  while (!trainer.done()) {
    const StepMetrics m = trainer.step();
    const std::int64_t done_iters = trainer.state().iteration;
    if (cfg.log_every > 0 && (m.iter % cfg.log_every == 0 || done_iters == cfg.total_iterations)) {
      log << m.to_json().dump() << '\n';
      log.flush();
    }
    if (m.collapse_warning && !warned) {
      std::cerr << "warning: teacher entropy " << m.teacher_entropy << " below 0.1 ln K for "
                << trainer.state().monitor_streak << " consecutive steps (iteration " << m.iter
                << ")\n";
      warned = true;
    }
    result.metrics.push_back(m);
    if (on_step) on_step(m);
    if (cfg.checkpoint_every > 0 && done_iters % cfg.checkpoint_every == 0 &&
        done_iters < cfg.total_iterations) {
      save_checkpoint<T>(out_dir / ("ckpt_" + std::to_string(done_iters) + ".tapckpt"), cfg,
                         trainer.model().layout(), trainer.state());
    }
  }
  result.checkpoint = out_dir / "final.tapckpt";
  save_checkpoint<T>(result.checkpoint, cfg, trainer.model().layout(), trainer.state());
  return result;
}

}  // namespace

PretrainResult pretrain_on(const TrainConfig& cfg, std::vector<Volume> raw,
                           const std::filesystem::path& out_dir,
                           const std::optional<std::filesystem::path>& resume,
                           const std::function<void(const StepMetrics&)>& on_step) {
  cfg.validate();
  if (raw.empty()) throw ValidationError("no training volumes");
  std::optional<Archive> archive;
  NormStats norm;
  if (resume) {
    archive = read_archive(*resume);
    const auto& n = archive->manifest.at("norm");
    norm = {n.at("mean").get<double>(), n.at("std").get<double>(), n.at("clip_min").get<double>(),
            n.at("clip_max").get<double>()};
  } else {
    norm = resolve_norm(cfg, raw);
  }
  norm.validate();
  for (auto& v : raw) v = normalize(v, norm);
  if (cfg.deterministic) return run_training<double>(cfg, std::move(raw), norm, out_dir, archive, on_step);
  return run_training<float>(cfg, std::move(raw), norm, out_dir, archive, on_step);
}

PretrainResult pretrain(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& resume,
                        const std::function<void(const StepMetrics&)>& on_step) {
  return pretrain_on(cfg, load_training_volumes(cfg.data_root), out_dir, resume, on_step);
}

template class SslModel<float>;
template class SslModel<double>;
template class Trainer<float>;
template class Trainer<double>;
template ParamVec<float> initial_params<float>(const ParamLayout&, std::uint64_t);
template ParamVec<double> initial_params<double>(const ParamLayout&, std::uint64_t);
template double clip_grad_norm<float>(std::span<float>, double);
template double clip_grad_norm<double>(std::span<double>, double);

}  // namespace tapct
