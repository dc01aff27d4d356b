// SPDX-License-Identifier: Apache-2.0

#include "tapct/volcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

namespace tapct {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ContainerPaths {
  fs::path sidecar;
  fs::path payload;
};

ContainerPaths container_paths(const fs::path& path) {
  fs::path stem = path;
  if (stem.extension() == ".json" || stem.extension() == ".raw") stem.replace_extension();
  return {fs::path(stem.string() + ".json"), fs::path(stem.string() + ".raw")};
}

json read_sidecar(const fs::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw ValidationError("missing file: " + sidecar.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed header " + sidecar.string() + ": " + e.what());
  }
}

Extent3 read_shape(const json& j, const fs::path& sidecar) {
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 3) {
    throw ValidationError("malformed header " + sidecar.string() + ": shape must be [z,y,x]");
  }
  Extent3 e{j["shape"][0].get<int>(), j["shape"][1].get<int>(), j["shape"][2].get<int>()};
  if (!e.positive()) {
    throw ValidationError("malformed header " + sidecar.string() + ": extents must be >= 1");
  }
  return e;
}

template <typename T>
std::vector<T> read_payload(const fs::path& payload, std::int64_t count) {
  std::ifstream in(payload, std::ios::binary | std::ios::ate);
  if (!in) throw ValidationError("missing file: " + payload.string());
  const auto bytes = static_cast<std::int64_t>(in.tellg());
  if (bytes != count * static_cast<std::int64_t>(sizeof(T))) {
    throw ValidationError("payload size mismatch in " + payload.string() + ": expected " +
                          std::to_string(count) + " values, file holds " +
                          std::to_string(bytes / static_cast<std::int64_t>(sizeof(T))));
  }
  in.seekg(0);
  std::vector<T> out(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(out.data()), bytes);
  if (!in) throw IoError("short read on " + payload.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      v = std::bit_cast<T>(raw);
    }
  }
  return out;
}

template <typename T>
void write_payload(const fs::path& payload, const std::vector<T>& values) {
  std::ofstream out(payload, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + payload.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (T v : values) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      out.write(reinterpret_cast<const char*>(raw.data()), sizeof(T));
    }
  } else {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  }
  if (!out) throw IoError("write failed on " + payload.string());
}

void write_sidecar(const fs::path& sidecar, const json& j) {
  if (sidecar.has_parent_path()) fs::create_directories(sidecar.parent_path());
  std::ofstream out(sidecar, std::ios::trunc);
  if (!out) throw IoError("cannot write " + sidecar.string());
  out << j.dump(2) << "\n";
}

}  // namespace

void Volume::validate() const {
  if (!shape().positive()) throw ValidationError("volume extents must be >= 1");
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("volume spacing must be > 0");
  }
  for (float v : data.values()) {
    if (!std::isfinite(v)) throw ValidationError("volume '" + id + "' contains NaN/Inf");
  }
}

void NormStats::validate() const {
  if (!(std > 0.0) || !std::isfinite(std)) throw ValidationError("invalid stats: std must be > 0");
  if (!(clip_min < clip_max)) throw ValidationError("invalid stats: clip_min must be < clip_max");
}

int LabelMap::num_classes() const {
  if (remap) {
    int mx = 0;
    for (const auto& [from, to] : *remap) mx = std::max(mx, to);
    return std::max(mx + 1, static_cast<int>(class_names.size()));
  }
  if (!class_names.empty()) return static_cast<int>(class_names.size());
  int mx = 0;
  for (auto v : labels.values()) mx = std::max(mx, static_cast<int>(v));
  return mx + 1;
}

LabelMap LabelMap::applied() const {
  LabelMap out{labels, class_names, std::nullopt};
  if (!remap) return out;
  for (auto& v : out.labels.values()) {
    auto it = remap->find(v);
    if (it != remap->end()) v = static_cast<std::uint16_t>(it->second);
  }
  return out;
}

void LabelMap::validate() const {
  if (!shape().positive()) throw ValidationError("label extents must be >= 1");
  const LabelMap flat = applied();
  const int n = num_classes();
  for (auto v : flat.labels.values()) {
    if (v >= n) {
      throw ValidationError("label id " + std::to_string(v) + " >= number of classes " +
                            std::to_string(n));
    }
  }
}

std::map<int, int> load_label_remap(const fs::path& path) {
  const json j = read_sidecar(path);
  if (!j.is_object()) throw ValidationError("label remap must be a JSON object");
  std::map<int, int> out;
  for (const auto& [k, v] : j.items()) {
    try {
      out[std::stoi(k)] = v.get<int>();
    } catch (const std::exception&) {
      throw ValidationError("label remap entries must be {\"int\": int}");
    }
  }
  return out;
}

Volume load_volume(const fs::path& path) {
  const auto paths = container_paths(path);
  const json j = read_sidecar(paths.sidecar);
  const Extent3 shape = read_shape(j, paths.sidecar);
  if (j.value("dtype", std::string{}) != "f32le") {
    throw ValidationError("malformed header " + paths.sidecar.string() + ": dtype must be f32le");
  }
  Volume v;
  if (j.contains("spacing")) {
    const auto& sp = j["spacing"];
    if (!sp.is_array() || sp.size() != 3) {
      throw ValidationError("malformed header " + paths.sidecar.string() + ": spacing must be [sz,sy,sx]");
    }
    v.spacing = {sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
  }
  v.id = j.value("id", paths.sidecar.stem().string());
  v.data = Grid3<float>(shape, read_payload<float>(paths.payload, shape.count()));
  v.validate();
  return v;
}

void save_volume(const Volume& v, const fs::path& path) {
  const auto paths = container_paths(path);
  json j;
  j["shape"] = {v.shape().z, v.shape().y, v.shape().x};
  j["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  j["dtype"] = "f32le";
  j["id"] = v.id;
  write_sidecar(paths.sidecar, j);
  write_payload(paths.payload, v.data.values());
}

LabelMap load_labels(const fs::path& path) {
  const auto paths = container_paths(path);
  const json j = read_sidecar(paths.sidecar);
  const Extent3 shape = read_shape(j, paths.sidecar);
  if (j.value("dtype", std::string{}) != "u16le") {
    throw ValidationError("malformed header " + paths.sidecar.string() + ": dtype must be u16le");
  }
  LabelMap m;
  if (j.contains("class_names")) m.class_names = j["class_names"].get<std::vector<std::string>>();
  m.labels = Grid3<std::uint16_t>(shape, read_payload<std::uint16_t>(paths.payload, shape.count()));
  return m;
}

void save_labels(const LabelMap& labels, const fs::path& path) {
  const auto paths = container_paths(path);
  json j;
  j["shape"] = {labels.shape().z, labels.shape().y, labels.shape().x};
  j["dtype"] = "u16le";
  j["class_names"] = labels.class_names;
  write_sidecar(paths.sidecar, j);
  write_payload(paths.payload, labels.labels.values());
}

std::string sidecar_dtype(const fs::path& path) {
  return read_sidecar(container_paths(path).sidecar).value("dtype", std::string{});
}

std::vector<fs::path> list_containers(const fs::path& dir, const std::string& dtype) {
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    const json j = read_sidecar(entry.path());
    if (j.is_object() && j.value("dtype", std::string{}) == dtype) {
      out.push_back(entry.path().parent_path() / entry.path().stem());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Volume normalize(const Volume& v, const NormStats& s) {
  s.validate();
  Volume out{v.data, v.spacing, v.id};
  const double lo = s.clip_min;
  const double hi = s.clip_max;
  for (auto& x : out.data.values()) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    x = static_cast<float>((c - s.mean) / s.std);
  }
  return out;
}

double percentile_sorted(std::span<const float> sorted, double pct) {
  if (sorted.empty()) throw ValidationError("percentile of empty set");
  const double rank = pct / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) +
         (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo])) * frac;
}

NormStats compute_foreground_stats(std::span<const Volume> volumes, double fg_threshold) {
  std::vector<float> fg;
  for (const auto& v : volumes) {
    for (float x : v.data.values()) {
      if (x > fg_threshold) fg.push_back(x);
    }
  }
  if (fg.empty()) throw ValidationError("empty foreground: no voxel exceeds the threshold");

  double sum = 0.0;
  for (float x : fg) sum += x;
  const double mean = sum / static_cast<double>(fg.size());
  double sq = 0.0;
  for (float x : fg) sq += (x - mean) * (x - mean);
  const double std = std::sqrt(sq / static_cast<double>(fg.size()));
  if (!(std > 0.0)) throw ValidationError("degenerate std: foreground intensities are constant");

  std::sort(fg.begin(), fg.end());
  NormStats s{mean, std, percentile_sorted(fg, 0.5), percentile_sorted(fg, 99.5)};
  if (!(s.clip_min < s.clip_max)) {
    throw ValidationError("degenerate percentiles: clip_min == clip_max");
  }
  return s;
}

namespace {

struct Ellipsoid {
  double cz, cy, cx;
  double rz, ry, rx;
  double cos_t, sin_t;

  // Squared normalized radius; <= 1 inside.
  [[nodiscard]] double radius2(double z, double y, double x) const {
    const double dz = z - cz;
    const double dy = y - cy;
    const double dx = x - cx;
    const double u = cos_t * dy + sin_t * dx;
    const double w = -sin_t * dy + cos_t * dx;
    return dz * dz / (rz * rz) + u * u / (ry * ry) + w * w / (rx * rx);
  }
};

double band_center(int k) {
  // Alternating bright/dark bands around soft tissue at 40.
  const double offset = 110.0 + 90.0 * static_cast<double>((k - 1) / 2);
  return 40.0 + ((k % 2 == 1) ? offset : -offset);
}

}  // namespace

Phantom synth_volume(std::uint64_t seed, Extent3 extents, int n_blobs) {
  if (extents.z < 8 || extents.y < 32 || extents.x < 32) {
    throw ValidationError("synth extents must be >= (8,32,32), got " + to_string(extents));
  }
  if (n_blobs < 1 || n_blobs > 65534) throw ValidationError("n_blobs must be >= 1");

  const int Z = extents.z, Y = extents.y, X = extents.x;
  const std::int64_t total = extents.count();
  const auto min_count = static_cast<std::int64_t>(std::ceil(0.01 * static_cast<double>(total)));

  Rng shape_rng = Rng::derive(seed, {0x5badULL});
  Grid3<std::uint16_t> labels(extents, 0);
  std::vector<Ellipsoid> blobs;
  bool placed = false;
  for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
    blobs.clear();
    std::fill(labels.values().begin(), labels.values().end(), 0);
    for (int k = 1; k <= n_blobs; ++k) {
      const double s = std::max(0.55, 1.0 - 0.12 * (k - 1));
      Ellipsoid e{};
      e.rz = Z * shape_rng.uniform(0.20, 0.32);
      e.ry = Y * s * shape_rng.uniform(0.14, 0.22);
      e.rx = X * s * shape_rng.uniform(0.14, 0.22);
      e.cz = shape_rng.uniform(0.3 * Z, 0.7 * Z);
      e.cy = shape_rng.uniform(e.ry, Y - e.ry);
      e.cx = shape_rng.uniform(e.rx, X - e.rx);
      const double theta = shape_rng.uniform(0.0, std::numbers::pi);
      e.cos_t = std::cos(theta);
      e.sin_t = std::sin(theta);
      blobs.push_back(e);
      for (int z = 0; z < Z; ++z)
        for (int y = 0; y < Y; ++y)
          for (int x = 0; x < X; ++x)
            if (e.radius2(z + 0.5, y + 0.5, x + 0.5) <= 1.0) labels(z, y, x) = static_cast<std::uint16_t>(k);
    }
    std::vector<std::int64_t> counts(static_cast<std::size_t>(n_blobs) + 1, 0);
    for (auto v : labels.values()) ++counts[v];
    placed = std::all_of(counts.begin() + 1, counts.end(),
                         [&](std::int64_t c) { return c >= min_count; });
  }
  if (!placed) {
    throw ValidationError("extents " + to_string(extents) + " too small to place " +
                          std::to_string(n_blobs) + " blobs");
  }

  // Smooth background field: a few low-frequency cosines.
  Rng field_rng = Rng::derive(seed, {0xf1e1dULL});
  struct Wave {
    double kz, ky, kx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    Wave w{};
    w.kz = 2.0 * std::numbers::pi * field_rng.uniform(0.2, 1.0) / Z;
    w.ky = 2.0 * std::numbers::pi * field_rng.uniform(0.5, 1.5) / Y;
    w.kx = 2.0 * std::numbers::pi * field_rng.uniform(0.5, 1.5) / X;
    w.phase = field_rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.amp = field_rng.uniform(8.0, 14.0);
    waves.push_back(w);
  }
  std::vector<double> band(static_cast<std::size_t>(n_blobs) + 1, 40.0);
  std::vector<double> texture(static_cast<std::size_t>(n_blobs) + 1, 18.0);
  for (int k = 1; k <= n_blobs; ++k) {
    band[static_cast<std::size_t>(k)] = band_center(k) + field_rng.uniform(-15.0, 15.0);
    texture[static_cast<std::size_t>(k)] = 12.0 + 8.0 * ((k - 1) % 3);
  }

  Rng noise_rng = Rng::derive(seed, {0x7015eULL});
  Grid3<float> data(extents, 0.0f);
  for (int z = 0; z < Z; ++z) {
    for (int y = 0; y < Y; ++y) {
      for (int x = 0; x < X; ++x) {
        double field = 0.0;
        for (const auto& w : waves) field += w.amp * std::cos(w.kz * z + w.ky * y + w.kx * x + w.phase);
        const std::uint16_t k = labels(z, y, x);
        double value = 40.0 + field;
        if (k > 0) {
          const double r2 = blobs[static_cast<std::size_t>(k) - 1].radius2(z + 0.5, y + 0.5, x + 0.5);
          const double mu = band[k];
          value = mu + 0.15 * (mu - 40.0) * (1.0 - r2) + 0.5 * field;
        }
        value += texture[k] * noise_rng.normal();
        data(z, y, x) = static_cast<float>(value);
      }
    }
  }

  Phantom p;
  p.volume.data = std::move(data);
  p.volume.spacing = {1.5, 0.79, 0.79};
  p.volume.id = "synth-" + std::to_string(seed);
  p.labels.labels = std::move(labels);
  p.labels.class_names.push_back("background");
  for (int k = 1; k <= n_blobs; ++k) p.labels.class_names.push_back("organ_" + std::to_string(k));
  return p;
}

std::uint64_t checksum(const Volume& v) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float f : v.data.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace tapct
