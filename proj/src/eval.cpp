// SPDX-License-Identifier: Apache-2.0

#include "tapct/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace tapct {

namespace {

nlohmann::json extent_json(const Extent3& e) { return {e.z, e.y, e.x}; }

Extent3 extent_from(const nlohmann::json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

void write_floats(const std::filesystem::path& path, const float* data, std::size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      unsigned char b[4];
      for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<float> read_floats(const std::filesystem::path& path, std::size_t n) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw ValidationError("missing file " + path.string());
  const auto size = static_cast<std::size_t>(is.tellg());
  if (size != n * sizeof(float)) throw ValidationError("payload size mismatch in " + path.string());
  is.seekg(0);
  std::vector<unsigned char> bytes(size);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(k)]) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("missing file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed header " + path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w;
};

// Half-voxel-center linear taps from `from` cells to `to` samples.
Taps upsample_taps(int from, int to) {
  Taps t;
  const auto n = static_cast<std::size_t>(to);
  t.i0.resize(n);
  t.i1.resize(n);
  t.w.resize(n);
  for (int i = 0; i < to; ++i) {
    double src = (i + 0.5) * from / to - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > from - 1) lo = from - 1;
    const auto k = static_cast<std::size_t>(i);
    t.i0[k] = lo;
    t.i1[k] = std::min(lo + 1, from - 1);
    t.w[k] = src - lo;
  }
  return t;
}

// Voxel grid of the unpadded volume sampled from the padded cell grid.
template <typename F>
void for_each_voxel_corner(const EmbeddingField& f, F&& fn) {
  const Extent3 g = f.grid;
  const Taps tz = upsample_taps(g.z, g.z * f.patch.z);
  const Taps ty = upsample_taps(g.y, g.y * f.patch.y);
  const Taps tx = upsample_taps(g.x, g.x * f.patch.x);
  const Extent3 out = f.volume_shape;
  Eigen::Index vox = 0;
  for (int z = 0; z < out.z; ++z)
    for (int y = 0; y < out.y; ++y)
      for (int x = 0; x < out.x; ++x, ++vox) {
        const auto kz = static_cast<std::size_t>(z);
        const auto ky = static_cast<std::size_t>(y);
        const auto kx = static_cast<std::size_t>(x);
        const int zs[2] = {tz.i0[kz], tz.i1[kz]};
        const int ys[2] = {ty.i0[ky], ty.i1[ky]};
        const int xs[2] = {tx.i0[kx], tx.i1[kx]};
        const double wz[2] = {1.0 - tz.w[kz], tz.w[kz]};
        const double wy[2] = {1.0 - ty.w[ky], ty.w[ky]};
        const double wx[2] = {1.0 - tx.w[kx], tx.w[kx]};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const double w = wz[a] * wy[b] * wx[c];
              if (w == 0.0) continue;
              fn(vox, (static_cast<Eigen::Index>(zs[a]) * g.y + ys[b]) * g.x + xs[c], w);
            }
      }
}

Mat<double> upsample(const EmbeddingField& f, const Mat<double>& cells) {
  Mat<double> out = Mat<double>::Zero(f.volume_shape.count(), cells.cols());
  for_each_voxel_corner(f, [&](Eigen::Index v, Eigen::Index c, double w) { out.row(v) += w * cells.row(c); });
  return out;
}

Mat<double> upsample_adjoint(const EmbeddingField& f, const Mat<double>& vox) {
  Mat<double> out = Mat<double>::Zero(f.cells(), vox.cols());
  for_each_voxel_corner(f, [&](Eigen::Index v, Eigen::Index c, double w) { out.row(c) += w * vox.row(v); });
  return out;
}

struct Adam {
  std::vector<double> m, v;
  std::int64_t t = 0;

  void step(std::vector<double>& p, const std::vector<double>& g, double lr, double wd) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    ++t;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    const double bc2 = std::sqrt(1.0 - std::pow(0.999, static_cast<double>(t)));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * wd;
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      p[i] -= (lr / bc1) * m[i] / (std::sqrt(v[i]) / bc2 + 1e-8);
    }
  }
};

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embedding fields

void EmbeddingField::validate() const {
  if (!grid.positive() || !patch.positive() || dim < 1) throw ValidationError("empty embedding field");
  if (values.rows() != grid.count() || values.cols() != dim) {
    throw ValidationError("embedding field payload does not match its grid");
  }
  if (static_cast<std::int64_t>(coverage.size()) != grid.count()) {
    throw ValidationError("embedding field coverage does not match its grid");
  }
  for (int c : coverage)
    if (c < 1) throw ValidationError("embedding field has an uncovered cell");
  if (!values.allFinite()) throw ValidationError("embedding field contains non-finite values");
  if (!volume_shape.positive()) throw ValidationError("embedding field volume shape is empty");
}

FrozenEncoder make_encoder(const FrozenBackbone& backbone) {
  return [&backbone](const Grid3<float>& window) {
    const EncoderOutput<float> out = backbone.encode(window);
    return WindowEncoding{out.patches(), out.grid, out.cls()};
  };
}

std::vector<int> window_starts(int extent, int window, int stride) {
  if (window < 1 || stride < 1) throw ValidationError("window and stride must be >= 1");
  if (window > extent) throw ValidationError("window larger than the padded volume");
  std::vector<int> s;
  for (int p = 0; p + window < extent; p += stride) s.push_back(p);
  s.push_back(extent - window);
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

EmbeddingField extract_embeddings(const FrozenEncoder& encoder, const Volume& v, Extent3 window,
                                  Extent3 stride, Extent3 patch, bool keep_cls) {
  v.validate();
  const PatchGrid wg = PatchGrid::of(window, patch);
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1 || stride[a] % patch[a] != 0) {
      throw ValidationError("stride " + to_string(stride) + " must be a positive multiple of patch " +
                            to_string(patch));
    }
  }
  const Extent3 s = v.shape();
  Extent3 padded;
  for (int a = 0; a < 3; ++a) {
    padded[a] = (s[a] + patch[a] - 1) / patch[a] * patch[a];
    if (window[a] > padded[a]) {
      throw ValidationError("window " + to_string(window) + " larger than volume " + to_string(s) +
                            " padded to the patch grid");
    }
  }
  Grid3<float> pad(padded);
  for (int z = 0; z < padded.z; ++z)
    for (int y = 0; y < padded.y; ++y)
      for (int x = 0; x < padded.x; ++x)
        pad(z, y, x) = v.data(std::min(z, s.z - 1), std::min(y, s.y - 1), std::min(x, s.x - 1));

  EmbeddingField f;
  f.patch = patch;
  f.grid = {padded.z / patch.z, padded.y / patch.y, padded.x / patch.x};
  f.volume_shape = s;
  f.spacing = v.spacing;
  f.id = v.id;
  f.coverage.assign(static_cast<std::size_t>(f.grid.count()), 0);

  const auto zs = window_starts(padded.z, window.z, stride.z);
  const auto ys = window_starts(padded.y, window.y, stride.y);
  const auto xs = window_starts(padded.x, window.x, stride.x);
  Mat<double> sum;
  std::vector<RowVec<float>> cls_rows;
  Grid3<float> win(window);
  for (int z0 : zs)
    for (int y0 : ys)
      for (int x0 : xs) {
        for (int z = 0; z < window.z; ++z)
          for (int y = 0; y < window.y; ++y)
            for (int x = 0; x < window.x; ++x) win(z, y, x) = pad(z0 + z, y0 + y, x0 + x);
        const WindowEncoding enc = encoder(win);
        if (!(enc.grid == wg.tokens) || enc.patches.rows() != wg.count()) {
          throw RuntimeFailure("encoder returned a token grid that does not match the window");
        }
        if (f.dim == 0) {
          f.dim = static_cast<int>(enc.patches.cols());
          sum = Mat<double>::Zero(f.grid.count(), f.dim);
        }
        Eigen::Index t = 0;
        for (int iz = 0; iz < wg.tokens.z; ++iz)
          for (int iy = 0; iy < wg.tokens.y; ++iy)
            for (int ix = 0; ix < wg.tokens.x; ++ix, ++t) {
              const Eigen::Index cell =
                  (static_cast<Eigen::Index>(z0 / patch.z + iz) * f.grid.y + (y0 / patch.y + iy)) * f.grid.x +
                  (x0 / patch.x + ix);
              sum.row(cell) += enc.patches.row(t).cast<double>();
              ++f.coverage[static_cast<std::size_t>(cell)];
            }
        if (keep_cls) cls_rows.push_back(enc.cls);
      }
  f.values.resize(f.grid.count(), f.dim);
  for (Eigen::Index c = 0; c < f.values.rows(); ++c) {
    f.values.row(c) = (sum.row(c) / f.coverage[static_cast<std::size_t>(c)]).cast<float>();
  }
  f.cls.resize(static_cast<Eigen::Index>(cls_rows.size()), f.dim);
  for (std::size_t i = 0; i < cls_rows.size(); ++i) f.cls.row(static_cast<Eigen::Index>(i)) = cls_rows[i];
  f.validate();
  return f;
}

void save_field(const EmbeddingField& field, const std::filesystem::path& stem) {
  field.validate();
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const std::string base = stem.string();
  nlohmann::json j = {{"kind", "embedding_field"},
                      {"dtype", "f32le"},
                      {"grid", extent_json(field.grid)},
                      {"patch", extent_json(field.patch)},
                      {"dim", field.dim},
                      {"volume_shape", extent_json(field.volume_shape)},
                      {"spacing", field.spacing},
                      {"id", field.id},
                      {"coverage", field.coverage}};
  write_json(base + ".emb.json", j);
  write_floats(base + ".emb.raw", field.values.data(), static_cast<std::size_t>(field.values.size()));
  if (field.cls.rows() > 0) {
    write_json(base + ".cls.json", {{"kind", "cls_bag"},
                                    {"dtype", "f32le"},
                                    {"rows", field.cls.rows()},
                                    {"dim", field.dim},
                                    {"id", field.id}});
    write_floats(base + ".cls.raw", field.cls.data(), static_cast<std::size_t>(field.cls.size()));
  }
}

EmbeddingField load_field(const std::filesystem::path& stem) {
  std::string base = stem.string();
  for (const std::string suffix : {".emb.json", ".emb.raw"}) {
    if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
      base.erase(base.size() - suffix.size());
    }
  }
  const nlohmann::json j = read_json(base + ".emb.json");
  EmbeddingField f;
  try {
    f.grid = extent_from(j.at("grid"));
    f.patch = extent_from(j.at("patch"));
    f.dim = j.at("dim").get<int>();
    f.volume_shape = extent_from(j.at("volume_shape"));
    f.spacing = j.at("spacing").get<Spacing>();
    f.id = j.value("id", std::string());
    f.coverage = j.at("coverage").get<std::vector<int>>();
    if (j.at("dtype").get<std::string>() != "f32le") throw ValidationError("unsupported field dtype");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed header " + base + ".emb.json: " + e.what());
  }
  if (!f.grid.positive() || f.dim < 1) throw ValidationError("malformed header " + base + ".emb.json");
  const auto vals = read_floats(base + ".emb.raw", static_cast<std::size_t>(f.grid.count() * f.dim));
  f.values = Eigen::Map<const Mat<float>>(vals.data(), f.grid.count(), f.dim);
  if (std::filesystem::exists(base + ".cls.json")) {
    const nlohmann::json c = read_json(base + ".cls.json");
    const auto rows = c.at("rows").get<Eigen::Index>();
    const auto cv = read_floats(base + ".cls.raw", static_cast<std::size_t>(rows * f.dim));
    f.cls = Eigen::Map<const Mat<float>>(cv.data(), rows, f.dim);
  } else {
    f.cls.resize(0, f.dim);
  }
  f.validate();
  return f;
}

// ---------------------------------------------------------------------------
// Segmentation probe

Mat<double> seg_voxel_logits(const SegHead& head, const EmbeddingField& field) {
  if (head.weight.cols() != field.dim) throw ValidationError("segmentation head dim mismatch");
  Mat<double> cells = field.values.cast<double>() * head.weight.transpose();
  cells.rowwise() += head.bias;
  return upsample(field, cells);
}

LabelMap predict_seg(const SegHead& head, const EmbeddingField& field) {
  const Mat<double> logits = seg_voxel_logits(head, field);
  LabelMap out;
  out.labels = Grid3<std::uint16_t>(field.volume_shape, 0);
  auto& vals = out.labels.values();
  for (Eigen::Index v = 0; v < logits.rows(); ++v) {
    Eigen::Index best = 0;
    logits.row(v).maxCoeff(&best);
    vals[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(best);
  }
  return out;
}

SegHead train_seg(const std::vector<EmbeddingField>& fields, const std::vector<LabelMap>& labels,
                  int n_classes, const SegTrainConfig& cfg, double* final_loss) {
  if (fields.empty() || fields.size() != labels.size()) {
    throw ValidationError("train_seg needs one label map per embedding field");
  }
  if (n_classes < 2) throw ValidationError("train_seg needs at least two classes");
  if (cfg.epochs < 1 || cfg.accum < 1 || !(cfg.lr > 0.0)) throw ValidationError("invalid segmentation training config");
  const int dim = fields.front().dim;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    fields[i].validate();
    if (fields[i].dim != dim) throw ValidationError("embedding fields have different dims");
    if (!(labels[i].shape() == fields[i].volume_shape)) {
      throw ValidationError("label map " + to_string(labels[i].shape()) + " does not match volume " +
                            to_string(fields[i].volume_shape));
    }
    for (auto l : labels[i].labels.values()) {
      if (l >= n_classes) {
        throw ValidationError("class id " + std::to_string(l) + " >= n_classes " + std::to_string(n_classes));
      }
    }
  }
  const int C = n_classes;
  std::vector<double> params(static_cast<std::size_t>(C) * dim + C, 0.0);
  const auto unpack = [&](const std::vector<double>& p) {
    SegHead h;
    h.weight = Eigen::Map<const Mat<double>>(p.data(), C, dim);
    h.bias = Eigen::Map<const RowVec<double>>(p.data() + static_cast<std::ptrdiff_t>(C) * dim, C);
    return h;
  };
  const std::size_t n = fields.size();
  const auto steps_per_epoch = static_cast<std::int64_t>((n + static_cast<std::size_t>(cfg.accum) - 1) /
                                                         static_cast<std::size_t>(cfg.accum));
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  Adam opt;
  Rng rng = Rng::derive(cfg.seed, {0x5e9ULL});
  std::int64_t step = 0;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    std::vector<double> grad(params.size(), 0.0);
    int in_group = 0;
    epoch_loss = 0.0;
    for (std::size_t oi = 0; oi < n; ++oi) {
      const std::size_t i = order[oi];
      const SegHead head = unpack(params);
      const EmbeddingField& f = fields[i];
      const Mat<double> feats = f.values.cast<double>();
      Mat<double> cells = feats * head.weight.transpose();
      cells.rowwise() += head.bias;
      Mat<double> vox = upsample(f, cells);
      const auto& lab = labels[i].labels.values();
      const auto nv = static_cast<double>(vox.rows());
      double loss = 0.0;
      for (Eigen::Index v = 0; v < vox.rows(); ++v) {
        auto r = vox.row(v);
        const double mx = r.maxCoeff();
        r = (r.array() - mx).exp().matrix();
        const double s = r.sum();
        r /= s;
        const int y = lab[static_cast<std::size_t>(v)];
        loss -= std::log(std::max(r(y), 1e-300));
        r(y) -= 1.0;
      }
      vox /= nv;
      epoch_loss += loss / nv / static_cast<double>(n);
      const Mat<double> dcells = upsample_adjoint(f, vox);
      const Mat<double> dw = dcells.transpose() * feats;
      const RowVec<double> db = dcells.colwise().sum();
      for (int c = 0; c < C; ++c) {
        for (int d = 0; d < dim; ++d) grad[static_cast<std::size_t>(c) * dim + static_cast<std::size_t>(d)] += dw(c, d);
        grad[static_cast<std::size_t>(C) * dim + static_cast<std::size_t>(c)] += db(c);
      }
      ++in_group;
      if (in_group == cfg.accum || oi + 1 == n) {
        for (auto& g : grad) g /= in_group;
        opt.step(params, grad, cosine_lr(cfg.lr, step, total_steps), cfg.weight_decay);
        ++step;
        std::fill(grad.begin(), grad.end(), 0.0);
        in_group = 0;
      }
    }
  }
  if (final_loss) *final_loss = epoch_loss;
  return unpack(params);
}

// ---------------------------------------------------------------------------
// Lesion crops

Volume lesion_crop(const Volume& v, const std::array<double, 3>& center_mm, double extent_mm) {
  v.validate();
  if (!(extent_mm > 0.0)) throw ValidationError("crop extent must be > 0 mm");
  const Extent3 s = v.shape();
  Extent3 n;
  int start[3];
  for (int a = 0; a < 3; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    const double c = center_mm[ai] / v.spacing[ai];
    if (!(c >= -0.5 && c < s[a] - 0.5)) {
      throw ValidationError("crop center outside the volume along axis " + std::to_string(a));
    }
    n[a] = std::max(1, static_cast<int>(std::lround(extent_mm / v.spacing[ai])));
    start[a] = static_cast<int>(std::floor(c - n[a] / 2.0 + 0.5));
  }
  Volume out;
  out.spacing = v.spacing;
  out.id = v.id + "-crop";
  out.data = Grid3<float>(n);
  for (int z = 0; z < n.z; ++z)
    for (int y = 0; y < n.y; ++y)
      for (int x = 0; x < n.x; ++x) {
        out.data(z, y, x) = v.data(std::clamp(start[0] + z, 0, s.z - 1), std::clamp(start[1] + y, 0, s.y - 1),
                                   std::clamp(start[2] + x, 0, s.x - 1));
      }
  return out;
}

// ---------------------------------------------------------------------------
// ABMIL

AbmilHead init_abmil(int dim, int hidden, int n_out, std::uint64_t seed) {
  if (dim < 1 || hidden < 1 || n_out < 1) throw ValidationError("abmil sizes must be >= 1");
  Rng rng = Rng::derive(seed, {0xab1ULL});
  const auto normal = [&](int r, int c, double std) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std;
    return m;
  };
  AbmilHead h;
  h.v = normal(hidden, dim, 1.0 / std::sqrt(dim));
  h.u = normal(hidden, dim, 1.0 / std::sqrt(dim));
  h.bv = RowVec<double>::Zero(hidden);
  h.bu = RowVec<double>::Zero(hidden);
  h.w = normal(1, hidden, 1.0 / std::sqrt(hidden));
  h.c = Mat<double>::Zero(n_out, dim);
  h.bc = RowVec<double>::Zero(n_out);
  return h;
}

namespace {

struct AbmilCache {
  Mat<double> a, g;
  Vec<double> alpha;
  RowVec<double> pooled;
};

AbmilOutput abmil_run(const AbmilHead& h, const Mat<double>& bag, AbmilCache* cache) {
  if (bag.rows() == 0) throw ValidationError("empty bag");
  if (bag.cols() != h.dim()) throw ValidationError("bag embedding dim does not match the head");
  Mat<double> a = bag * h.v.transpose();
  a.rowwise() += h.bv;
  a = a.array().tanh().matrix();
  Mat<double> g = bag * h.u.transpose();
  g.rowwise() += h.bu;
  g = (1.0 / (1.0 + (-g.array()).exp())).matrix();
  Vec<double> s = (a.array() * g.array()).matrix() * h.w.transpose();
  s.array() += h.bw;
  const double mx = s.maxCoeff();
  Vec<double> alpha = (s.array() - mx).exp().matrix();
  alpha /= alpha.sum();
  AbmilOutput out;
  out.attention = alpha;
  out.pooled = alpha.transpose() * bag;
  out.logits = out.pooled * h.c.transpose() + h.bc;
  if (cache) {
    cache->a = std::move(a);
    cache->g = std::move(g);
    cache->alpha = alpha;
    cache->pooled = out.pooled;
  }
  return out;
}

std::vector<double> pack(const AbmilHead& h) {
  std::vector<double> p;
  for (const auto* m : {&h.v, &h.u, &h.c}) p.insert(p.end(), m->data(), m->data() + m->size());
  for (const auto* r : {&h.bv, &h.bu, &h.w, &h.bc}) p.insert(p.end(), r->data(), r->data() + r->size());
  p.push_back(h.bw);
  return p;
}

void unpack(const std::vector<double>& p, AbmilHead& h) {
  std::size_t o = 0;
  for (auto* m : {&h.v, &h.u, &h.c}) {
    std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(o), m->size(), m->data());
    o += static_cast<std::size_t>(m->size());
  }
  for (auto* r : {&h.bv, &h.bu, &h.w, &h.bc}) {
    std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(o), r->size(), r->data());
    o += static_cast<std::size_t>(r->size());
  }
  h.bw = p[o];
}

// Gradient of the head for d(loss)/d(logits) = dlogits, in pack() layout.
AbmilHead abmil_grad(const AbmilHead& h, const Mat<double>& bag, const AbmilCache& c,
                     const RowVec<double>& dlogits) {
  AbmilHead g;
  g.c = dlogits.transpose() * c.pooled;
  g.bc = dlogits;
  const RowVec<double> dpooled = dlogits * h.c;
  const Vec<double> dalpha = bag * dpooled.transpose();
  const double dot = c.alpha.dot(dalpha);
  const Vec<double> ds = (c.alpha.array() * (dalpha.array() - dot)).matrix();
  g.bw = ds.sum();
  const Mat<double> ag = (c.a.array() * c.g.array()).matrix();
  g.w = ds.transpose() * ag;
  const Mat<double> dag = ds * h.w;
  const Mat<double> dpre_a = (dag.array() * c.g.array() * (1.0 - c.a.array().square())).matrix();
  const Mat<double> dpre_g = (dag.array() * c.a.array() * c.g.array() * (1.0 - c.g.array())).matrix();
  g.v = dpre_a.transpose() * bag;
  g.bv = dpre_a.colwise().sum();
  g.u = dpre_g.transpose() * bag;
  g.bu = dpre_g.colwise().sum();
  return g;
}

}  // namespace

AbmilOutput abmil_forward(const AbmilHead& head, const Mat<double>& bag) {
  return abmil_run(head, bag, nullptr);
}

AbmilHead train_cls(const std::vector<Mat<double>>& bags, const Mat<int>& labels,
                    const ClsTrainConfig& cfg, std::vector<std::string>* warnings) {
  if (bags.empty() || static_cast<Eigen::Index>(bags.size()) != labels.rows()) {
    throw ValidationError("train_cls needs one label row per bag");
  }
  if (cfg.epochs < 1 || cfg.accum < 1 || !(cfg.lr > 0.0)) throw ValidationError("invalid classification training config");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int l = labels.data()[i];
    if (l != 0 && l != 1) throw ValidationError("classification labels must be 0 or 1");
  }
  for (Eigen::Index j = 0; j < labels.cols(); ++j) {
    const int pos = labels.col(j).sum();
    if ((pos == 0 || pos == labels.rows()) && warnings) {
      warnings->push_back("label " + std::to_string(j) +
                          " has a single class in training; AUC is undefined for it");
    }
  }
  const int dim = static_cast<int>(bags.front().cols());
  const int n_out = static_cast<int>(labels.cols());
  AbmilHead head = init_abmil(dim, cfg.hidden, n_out, cfg.seed);
  std::vector<double> params = pack(head);
  const std::size_t n = bags.size();
  const auto steps_per_epoch = static_cast<std::int64_t>((n + static_cast<std::size_t>(cfg.accum) - 1) /
                                                         static_cast<std::size_t>(cfg.accum));
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  Adam opt;
  Rng rng = Rng::derive(cfg.seed, {0xc15ULL});
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    std::vector<double> grad(params.size(), 0.0);
    int in_group = 0;
    for (std::size_t oi = 0; oi < n; ++oi) {
      const std::size_t i = order[oi];
      AbmilCache cache;
      const AbmilOutput out = abmil_run(head, bags[i], &cache);
      RowVec<double> dlogits(n_out);
      for (int l = 0; l < n_out; ++l) {
        const double z = out.logits(l);
        dlogits(l) = (1.0 / (1.0 + std::exp(-z)) - labels(static_cast<Eigen::Index>(i), l)) / n_out;
      }
      const auto g = pack(abmil_grad(head, bags[i], cache, dlogits));
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
      ++in_group;
      if (in_group == cfg.accum || oi + 1 == n) {
        for (auto& x : grad) x /= in_group;
        opt.step(params, grad, cosine_lr(cfg.lr, step, total_steps), cfg.weight_decay);
        unpack(params, head);
        ++step;
        std::fill(grad.begin(), grad.end(), 0.0);
        in_group = 0;
      }
    }
  }
  return head;
}

}  // namespace tapct
