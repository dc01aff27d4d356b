// SPDX-License-Identifier: Apache-2.0

#include "tapct/ssl.hpp"

#include <cmath>
#include <numbers>

#include "tapct/vit3d.hpp"

namespace tapct {

namespace {

constexpr double kNormEps = 1e-12;

template <typename T>
Mat<T> log_softmax_rows(const Mat<T>& logits, double temp) {
  Mat<T> out = logits / static_cast<T>(temp);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const T mx = r.maxCoeff();
    const T lse = mx + std::log((r.array() - mx).exp().sum());
    r.array() -= lse;
  }
  return out;
}

void check_temp(double t, const char* what) {
  if (!(t > 0.0)) throw ValidationError(std::string(what) + " temperature must be > 0");
}

}  // namespace

void HeadConfig::validate() const {
  if (prototypes < 1 || hidden < 1 || layers < 1 || bottleneck < 1) {
    throw ValidationError("head prototypes, hidden, layers and bottleneck must be >= 1");
  }
}

template <typename T>
DinoHead<T>::DinoHead(const HeadConfig& cfg, int in_dim, ParamLayout& layout,
                      const std::string& prefix, int layer_id)
    : cfg_(cfg), in_dim_(in_dim) {
  cfg_.validate();
  if (in_dim < 1) throw ValidationError("head input dim must be >= 1");
  int d_in = in_dim;
  for (int l = 0; l < cfg_.layers; ++l) {
    const int d_out = l + 1 == cfg_.layers ? cfg_.bottleneck : cfg_.hidden;
    const std::string n = prefix + ".mlp." + std::to_string(l);
    w_.push_back(layout.add(n + ".weight", d_out, d_in, layer_id, true, InitKind::trunc_normal, 0.02));
    b_.push_back(layout.add(n + ".bias", 1, d_out, layer_id, false, InitKind::zeros));
    d_in = d_out;
  }
  last_ = layout.add(prefix + ".last_layer.weight_v", cfg_.prototypes, cfg_.bottleneck, layer_id,
                     true, InitKind::trunc_normal, 0.02);
}

template <typename T>
Mat<T> DinoHead<T>::forward(const Mat<T>& x, std::span<const T> params, HeadCache<T>* cache) const {
  if (x.cols() != in_dim_) throw ValidationError("head input dim mismatch");
  HeadCache<T> local;
  HeadCache<T>& c = cache ? *cache : local;
  c.inputs.clear();
  c.pre.clear();
  Mat<T> h = x;
  for (int l = 0; l < cfg_.layers; ++l) {
    const auto k = static_cast<std::size_t>(l);
    Mat<T> y = h * cmat(params, w_[k]).transpose();
    y.rowwise() += crow(params, b_[k]);
    if (cache) c.inputs.push_back(std::move(h));
    if (l + 1 < cfg_.layers) {
      h = y.unaryExpr([](T v) { return gelu(v); });
      if (cache) c.pre.push_back(std::move(y));
    } else {
      h = std::move(y);
    }
  }
  c.z = std::move(h);
  c.z_norm = c.z.rowwise().norm();
  c.zn.resize(c.z.rows(), c.z.cols());
  for (Eigen::Index i = 0; i < c.z.rows(); ++i) {
    c.zn.row(i) = c.z.row(i) / std::max(c.z_norm(i), static_cast<T>(kNormEps));
  }
  const auto v = cmat(params, last_);
  c.v_norm = v.rowwise().norm();
  c.w_hat.resize(v.rows(), v.cols());
  for (Eigen::Index k = 0; k < v.rows(); ++k) {
    if (c.v_norm(k) > T(0)) {
      c.w_hat.row(k) = v.row(k) / c.v_norm(k);
    } else {
      c.w_hat.row(k).setZero();
    }
  }
  return c.zn * c.w_hat.transpose();
}

template <typename T>
Mat<T> DinoHead<T>::backward(const Mat<T>& dlogits, const HeadCache<T>& c,
                             std::span<const T> params, std::span<T> grads) const {
  const Mat<T> dw_hat = dlogits.transpose() * c.zn;
  auto dv = gmat(grads, last_);
  for (Eigen::Index k = 0; k < dw_hat.rows(); ++k) {
    if (c.v_norm(k) <= T(0)) continue;
    const T proj = dw_hat.row(k).dot(c.w_hat.row(k));
    dv.row(k) += (dw_hat.row(k) - proj * c.w_hat.row(k)) / c.v_norm(k);
  }
  const Mat<T> dzn = dlogits * c.w_hat;
  Mat<T> dh(dzn.rows(), dzn.cols());
  for (Eigen::Index i = 0; i < dzn.rows(); ++i) {
    if (c.z_norm(i) > static_cast<T>(kNormEps)) {
      const T proj = dzn.row(i).dot(c.zn.row(i));
      dh.row(i) = (dzn.row(i) - proj * c.zn.row(i)) / c.z_norm(i);
    } else {
      dh.row(i) = dzn.row(i) / static_cast<T>(kNormEps);
    }
  }
  for (int l = cfg_.layers - 1; l >= 0; --l) {
    const auto k = static_cast<std::size_t>(l);
    if (l + 1 < cfg_.layers) {
      dh.array() *= c.pre[k].unaryExpr([](T v) { return gelu_grad(v); }).array();
    }
    gmat(grads, w_[k]).noalias() += dh.transpose() * c.inputs[k];
    grow(grads, b_[k]) += dh.colwise().sum();
    dh = (dh * cmat(params, w_[k])).eval();
  }
  return dh;
}

template <typename T>
Mat<T> teacher_softmax(const Mat<T>& teacher_logits, const RowVec<T>& center, double temp) {
  check_temp(temp, "teacher");
  if (center.size() != teacher_logits.cols()) throw ValidationError("center size mismatch");
  Mat<T> p = (teacher_logits.rowwise() - center) / static_cast<T>(temp);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    const T mx = r.maxCoeff();
    r = (r.array() - mx).exp().matrix();
    r /= r.sum();
  }
  return p;
}

template <typename T>
double dino_loss(const std::vector<Mat<T>>& student_logits, const std::vector<Mat<T>>& teacher_probs,
                 double student_temp, std::vector<Mat<T>>* grads) {
  check_temp(student_temp, "student");
  if (teacher_probs.empty() || student_logits.empty()) throw ValidationError("dino_loss needs views");
  const Eigen::Index rows = teacher_probs.front().rows();
  const Eigen::Index k = teacher_probs.front().cols();
  for (const auto& m : student_logits)
    if (m.rows() != rows || m.cols() != k) throw ValidationError("dino_loss view shape mismatch");
  for (const auto& m : teacher_probs)
    if (m.rows() != rows || m.cols() != k) throw ValidationError("dino_loss view shape mismatch");
  if (rows == 0) throw ValidationError("dino_loss needs at least one sample");

  std::vector<Mat<T>> log_q;
  for (const auto& s : student_logits) log_q.push_back(log_softmax_rows(s, student_temp));
  if (grads) grads->assign(student_logits.size(), Mat<T>::Zero(rows, k));

  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < teacher_probs.size(); ++i) {
    for (std::size_t j = 0; j < student_logits.size(); ++j) {
      if (i == j) continue;
      total += -static_cast<double>((teacher_probs[i].array() * log_q[j].array()).sum()) /
               static_cast<double>(rows);
      ++pairs;
      if (grads) (*grads)[j] += log_q[j].array().exp().matrix() - teacher_probs[i];
    }
  }
  if (pairs == 0) throw ValidationError("dino_loss has no (teacher, student) pairs");
  if (grads) {
    const T s = static_cast<T>(1.0 / (student_temp * static_cast<double>(rows) * pairs));
    for (auto& g : *grads) g *= s;
  }
  return total / pairs;
}

template <typename T>
double dino_loss(const std::vector<Mat<T>>& student_logits,
                 const std::vector<Mat<T>>& teacher_logits, const RowVec<T>& center,
                 double student_temp, double teacher_temp, std::vector<Mat<T>>* grads) {
  std::vector<Mat<T>> probs;
  for (const auto& t : teacher_logits) probs.push_back(teacher_softmax<T>(t, center, teacher_temp));
  return dino_loss<T>(student_logits, probs, student_temp, grads);
}

template <typename T>
double ibot_loss(const std::vector<Mat<T>>& student_logits, const std::vector<Mat<T>>& teacher_probs,
                 double student_temp, std::vector<Mat<T>>* grads) {
  check_temp(student_temp, "student");
  if (student_logits.size() != teacher_probs.size()) {
    throw ValidationError("ibot_loss student/teacher view count mismatch");
  }
  const auto n_views = student_logits.size();
  if (grads) grads->assign(n_views, Mat<T>());
  if (n_views == 0) return 0.0;
  double total = 0.0;
  for (std::size_t v = 0; v < n_views; ++v) {
    const Mat<T>& s = student_logits[v];
    const Mat<T>& p = teacher_probs[v];
    if (s.rows() != p.rows() || s.cols() != p.cols()) {
      throw ValidationError("ibot_loss token layouts are misaligned");
    }
    if (grads) (*grads)[v] = Mat<T>::Zero(s.rows(), s.cols());
    if (s.rows() == 0) continue;
    const Mat<T> log_q = log_softmax_rows(s, student_temp);
    const auto m = static_cast<double>(s.rows());
    total += -static_cast<double>((p.array() * log_q.array()).sum()) / m;
    if (grads) {
      (*grads)[v] = (log_q.array().exp().matrix() - p) *
                    static_cast<T>(1.0 / (student_temp * m * static_cast<double>(n_views)));
    }
  }
  return total / static_cast<double>(n_views);
}

template <typename T>
double koleo_loss(const Mat<T>& x, double eps, Mat<T>* grad) {
  const Eigen::Index n = x.rows();
  if (n < 2) throw ValidationError("koleo_loss needs at least two rows");
  const Vec<T> norms = x.rowwise().norm();
  Mat<T> xn(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) xn.row(i) = x.row(i) / std::max(norms(i), static_cast<T>(kNormEps));
  const Mat<T> gram = xn * xn.transpose();
  Mat<T> dxn;
  if (grad) dxn = Mat<T>::Zero(n, x.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best < 0 || gram(i, j) > gram(i, best)) best = j;
    }
    const RowVec<T> u = xn.row(i) - xn.row(best);
    const double d = static_cast<double>(u.norm());
    total += std::log(d + eps);
    if (grad && d > 0.0) {
      const T c = static_cast<T>(-1.0 / (static_cast<double>(n) * (d + eps) * d));
      dxn.row(i) += c * u;
      dxn.row(best) -= c * u;
    }
  }
  if (grad) {
    grad->resize(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      if (norms(i) > static_cast<T>(kNormEps)) {
        const T proj = dxn.row(i).dot(xn.row(i));
        grad->row(i) = (dxn.row(i) - proj * xn.row(i)) / norms(i);
      } else {
        grad->row(i) = dxn.row(i) / static_cast<T>(kNormEps);
      }
    }
  }
  return -total / static_cast<double>(n);
}

template <typename T>
double mean_entropy(const Mat<T>& probs) {
  if (probs.rows() == 0) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (p > 0.0) h -= p * std::log(p);
    }
  return h / static_cast<double>(probs.rows());
}

template <typename T>
void update_teacher(std::span<const T> student, std::span<T> teacher, double m) {
  if (student.size() != teacher.size()) throw ValidationError("teacher/student parameter mismatch");
  if (!(m >= 0.0 && m <= 1.0)) throw ValidationError("teacher momentum must be in [0, 1]");
  const T a = static_cast<T>(m);
  const T b = static_cast<T>(1.0 - m);
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = a * teacher[i] + b * student[i];
}

template <typename T>
void Center<T>::update(const Mat<T>& teacher_logits) {
  if (teacher_logits.rows() == 0) return;
  if (teacher_logits.cols() != value.size()) throw ValidationError("center size mismatch");
  const RowVec<T> mean = teacher_logits.colwise().mean();
  value = static_cast<T>(momentum) * value + static_cast<T>(1.0 - momentum) * mean;
}

void ScheduleConfig::validate() const {
  if (!(base_lr >= 0.0) || !(batch_scale > 0.0) || !(lr_min_ratio >= 0.0)) {
    throw ValidationError("sched.base_lr, batch_scale and lr_min_ratio must be non-negative");
  }
  if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0) ||
      !(temp_warmup_frac >= 0.0 && temp_warmup_frac <= 1.0)) {
    throw ValidationError("warmup fractions must be in [0, 1]");
  }
  if (!(momentum.first >= 0.0 && momentum.second <= 1.0)) {
    throw ValidationError("sched.momentum must lie in [0, 1]");
  }
  if (!(teacher_temp.first > 0.0 && teacher_temp.second > 0.0)) {
    throw ValidationError("sched.teacher_temp must be > 0");
  }
}

ScheduleState schedules(std::int64_t iteration, std::int64_t total, const ScheduleConfig& cfg) {
  cfg.validate();
  if (total < 1) throw ValidationError("schedule total must be >= 1");
  if (iteration < 0 || iteration > total) {
    throw ValidationError("iteration " + std::to_string(iteration) + " outside [0, " +
                          std::to_string(total) + "]");
  }
  ScheduleState s;
  s.iteration = iteration;
  s.total = total;
  const double it = static_cast<double>(iteration);
  const double tot = static_cast<double>(total);

  const double peak = cfg.base_lr * cfg.batch_scale;
  const double lr_min = cfg.base_lr * cfg.lr_min_ratio;
  const std::int64_t warm = std::llround(cfg.warmup_frac * tot);
  if (iteration < warm) {
    s.lr = peak * it / static_cast<double>(warm);
  } else {
    const double p = total > warm ? (it - static_cast<double>(warm)) / static_cast<double>(total - warm)
                                  : 1.0;
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    s.lr = peak * c + lr_min * (1.0 - c);
  }

  const double c_run = 0.5 * (1.0 + std::cos(std::numbers::pi * it / tot));
  s.weight_decay = cfg.wd.first * c_run + cfg.wd.second * (1.0 - c_run);
  s.teacher_momentum = cfg.momentum.first * c_run + cfg.momentum.second * (1.0 - c_run);

  const std::int64_t temp_warm = std::llround(cfg.temp_warmup_frac * tot);
  if (iteration < temp_warm) {
    const double f = it / static_cast<double>(temp_warm);
    s.teacher_temp = cfg.teacher_temp.first * (1.0 - f) + cfg.teacher_temp.second * f;
  } else {
    s.teacher_temp = cfg.teacher_temp.second;
  }
  return s;
}

#define TAPCT_INSTANTIATE(T)                                                                    \
  template class DinoHead<T>;                                                                   \
  template struct Center<T>;                                                                    \
  template Mat<T> teacher_softmax<T>(const Mat<T>&, const RowVec<T>&, double);                  \
  template double dino_loss<T>(const std::vector<Mat<T>>&, const std::vector<Mat<T>>&, double,  \
                               std::vector<Mat<T>>*);                                           \
  template double dino_loss<T>(const std::vector<Mat<T>>&, const std::vector<Mat<T>>&,          \
                               const RowVec<T>&, double, double, std::vector<Mat<T>>*);         \
  template double ibot_loss<T>(const std::vector<Mat<T>>&, const std::vector<Mat<T>>&, double,  \
                               std::vector<Mat<T>>*);                                           \
  template double koleo_loss<T>(const Mat<T>&, double, Mat<T>*);                                \
  template double mean_entropy<T>(const Mat<T>&);                                               \
  template void update_teacher<T>(std::span<const T>, std::span<T>, double);

TAPCT_INSTANTIATE(float)
TAPCT_INSTANTIATE(double)

#undef TAPCT_INSTANTIATE

}  // namespace tapct
