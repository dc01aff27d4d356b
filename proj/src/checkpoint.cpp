// SPDX-License-Identifier: Apache-2.0

#include "tapct/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace tapct {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

template <typename T>
constexpr const char* dtype_of() {
  return sizeof(T) == 4 ? "f32le" : "f64le";
}

void to_little(unsigned char* data, std::size_t n, std::size_t width) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i + width <= n; i += width) std::reverse(data + i, data + i + width);
  } else {
    (void)data;
    (void)n;
    (void)width;
  }
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ValidationError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

nlohmann::json norm_json(const NormStats& n) {
  return {{"mean", n.mean}, {"std", n.std}, {"clip_min", n.clip_min}, {"clip_max", n.clip_max}};
}

NormStats norm_from(const nlohmann::json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("clip_min").get<double>(),
          j.at("clip_max").get<double>()};
}

}  // namespace

template <typename T>
std::vector<T> ArchiveArray::as() const {
  const std::size_t width = dtype == "f32le" ? 4 : (dtype == "f64le" ? 8 : 0);
  if (width == 0) throw ValidationError("array " + name + " has unsupported dtype " + dtype);
  if (bytes.size() % width != 0) throw ValidationError("array " + name + " payload size mismatch");
  const std::size_t n = bytes.size() / width;
  std::vector<unsigned char> buf = bytes;
  to_little(buf.data(), buf.size(), width);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 4) {
      float f;
      std::memcpy(&f, buf.data() + 4 * i, 4);
      out[i] = static_cast<T>(f);
    } else {
      double d;
      std::memcpy(&d, buf.data() + 8 * i, 8);
      out[i] = static_cast<T>(d);
    }
  }
  return out;
}

const ArchiveArray& Archive::get(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw ValidationError("checkpoint has no array " + name);
}

bool Archive::contains(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const auto& a) { return a.name == name; });
}

template <typename T>
ArchiveArray make_array(const std::string& name, std::vector<std::int64_t> shape,
                        std::span<const T> values) {
  ArchiveArray a;
  a.name = name;
  a.dtype = dtype_of<T>();
  a.shape = std::move(shape);
  a.bytes.resize(values.size() * sizeof(T));
  std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  to_little(a.bytes.data(), a.bytes.size(), sizeof(T));
  return a;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json manifest = archive.manifest;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : archive.arrays) {
    entries.push_back({{"name", a.name},
                       {"dtype", a.dtype},
                       {"shape", a.shape},
                       {"offset", offset},
                       {"bytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  manifest["arrays"] = entries;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : archive.arrays) {
      os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    }
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("missing checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw ValidationError(path.string() + " is not a checkpoint archive");
  }
  const std::uint64_t len = read_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError("truncated checkpoint manifest");
  Archive ar;
  try {
    ar.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const auto data_start = static_cast<std::streamoff>(16 + len);
  for (const auto& e : ar.manifest.at("arrays")) {
    ArchiveArray a;
    a.name = e.at("name").get<std::string>();
    a.dtype = e.at("dtype").get<std::string>();
    a.shape = e.at("shape").get<std::vector<std::int64_t>>();
    a.bytes.resize(e.at("bytes").get<std::size_t>());
    is.seekg(data_start + e.at("offset").get<std::streamoff>());
    if (!is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()))) {
      throw ValidationError("truncated checkpoint array " + a.name);
    }
    ar.arrays.push_back(std::move(a));
  }
  return ar;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg,
                     const ParamLayout& layout, const TrainState<T>& state) {
  Archive ar;
  auto& m = ar.manifest;
  m["format"] = "tapct-checkpoint";
  m["version"] = 1;
  m["precision"] = dtype_of<T>();
  m["config"] = cfg.to_config().values();
  m["iteration"] = state.iteration;
  m["rng"] = {{"seed", cfg.seed},
              {"scheme", "every stream is derived from (seed, purpose, iteration, slot)"}};
  m["norm"] = norm_json(state.norm);
  m["monitor"] = {{"low_streak", state.monitor_streak}};
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : state.history) hist.push_back(h.to_json());
  m["metrics"] = hist;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : layout.entries()) {
    params.push_back({{"name", e.name}, {"shape", {e.ref.rows, e.ref.cols}}, {"layer_id", e.layer_id}});
  }
  m["parameters"] = params;

  const std::pair<const char*, const ParamVec<T>*> groups[] = {
      {"student", &state.student}, {"teacher", &state.teacher},
      {"adam_m", &state.adam_m},   {"adam_v", &state.adam_v}};
  for (const auto& [group, values] : groups) {
    if (values->size() != layout.total()) throw ValidationError("state does not match parameter layout");
    for (const auto& e : layout.entries()) {
      ar.arrays.push_back(make_array<T>(std::string(group) + "/" + e.name, {e.ref.rows, e.ref.cols},
                                        std::span<const T>(values->data() + e.ref.offset, e.ref.size())));
    }
  }
  const auto center = [&](const char* name, const Center<T>& c) {
    ar.arrays.push_back(make_array<T>(name, {1, c.value.size()},
                                      std::span<const T>(c.value.data(), static_cast<std::size_t>(c.value.size()))));
  };
  center("center/dino", state.center_dino);
  center("center/ibot", state.center_ibot);
  m["center_momentum"] = state.center_dino.momentum;
  write_archive(path, ar);
}

template <typename T>
TrainState<T> load_checkpoint_state(const Archive& ar, const ParamLayout& layout) {
  const auto& m = ar.manifest;
  const std::string precision = m.at("precision").get<std::string>();
  if (precision != dtype_of<T>()) {
    throw ValidationError("checkpoint precision " + precision + " does not match the requested " +
                          dtype_of<T>() + " mode (toggle --deterministic)");
  }
  TrainState<T> s;
  const auto load_group = [&](const std::string& group) {
    ParamVec<T> out(layout.total());
    for (const auto& e : layout.entries()) {
      const ArchiveArray& a = ar.get(group + "/" + e.name);
      if (a.shape != std::vector<std::int64_t>{e.ref.rows, e.ref.cols}) {
        throw ValidationError("checkpoint array " + a.name + " has a different shape");
      }
      const auto v = a.as<T>();
      std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(e.ref.offset));
    }
    return out;
  };
  s.student = load_group("student");
  s.teacher = load_group("teacher");
  s.adam_m = load_group("adam_m");
  s.adam_v = load_group("adam_v");
  const double cm = m.at("center_momentum").get<double>();
  const auto center = [&](const char* name) {
    const auto v = ar.get(name).as<T>();
    Center<T> c(static_cast<int>(v.size()), cm);
    for (std::size_t i = 0; i < v.size(); ++i) c.value(static_cast<Eigen::Index>(i)) = v[i];
    return c;
  };
  s.center_dino = center("center/dino");
  s.center_ibot = center("center/ibot");
  s.iteration = m.at("iteration").get<std::int64_t>();
  s.monitor_streak = m.at("monitor").at("low_streak").get<int>();
  s.norm = norm_from(m.at("norm"));
  for (const auto& h : m.at("metrics")) s.history.push_back(StepMetrics::from_json(h));
  return s;
}

TrainConfig checkpoint_config(const Archive& ar) {
  Config c;
  for (const auto& [k, v] : ar.manifest.at("config").items()) c.set(k, v.get<std::string>());
  return TrainConfig::from_config(c);
}

FrozenBackbone::FrozenBackbone(const ViTConfig& vit, ParamVec<float> params,
                               const NormStats& norm, Extent3 window)
    : net_(std::make_unique<VisionTransformer<float>>(vit, layout_)),
      params_(std::move(params)),
      norm_(norm),
      window_(window) {
  if (params_.size() != layout_.total()) throw ValidationError("backbone parameter count mismatch");
}

EncoderOutput<float> FrozenBackbone::encode(const Grid3<float>& normalized_window) const {
  return net_->forward(normalized_window, params_);
}

namespace {

template <typename Get>
ParamVec<float> backbone_params(const ViTConfig& vit, Get&& get) {
  ParamLayout layout;
  VisionTransformer<float> probe(vit, layout);
  ParamVec<float> out(layout.total());
  for (const auto& e : layout.entries()) {
    const std::vector<float> v = get(e);
    if (v.size() != e.ref.size()) throw ValidationError("parameter " + e.name + " has a different size");
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(e.ref.offset));
  }
  return out;
}

}  // namespace

FrozenBackbone load_backbone(const std::filesystem::path& path, bool teacher) {
  const Archive ar = read_archive(path);
  const TrainConfig cfg = checkpoint_config(ar);
  const std::string group = teacher ? "teacher/" : "student/";
  auto params = backbone_params(cfg.model.vit, [&](const ParamInfo& e) {
    return ar.get(group + e.name).as<float>();
  });
  return FrozenBackbone(cfg.model.vit, std::move(params), norm_from(ar.manifest.at("norm")),
                        cfg.model.global.view_shape());
}

FrozenBackbone random_backbone(const TrainConfig& cfg, const NormStats& norm) {
  SslModel<float> model(cfg.model.vit, cfg.head);
  const ParamVec<float> all = initial_params<float>(model.layout(), cfg.seed);
  auto params = backbone_params(cfg.model.vit, [&](const ParamInfo& e) {
    const ParamInfo& src = model.layout().find(e.name);
    return std::vector<float>(all.begin() + static_cast<std::ptrdiff_t>(src.ref.offset),
                              all.begin() + static_cast<std::ptrdiff_t>(src.ref.offset + src.ref.size()));
  });
  return FrozenBackbone(cfg.model.vit, std::move(params), norm, cfg.model.global.view_shape());
}

template std::vector<float> ArchiveArray::as<float>() const;
template std::vector<double> ArchiveArray::as<double>() const;
template ArchiveArray make_array<float>(const std::string&, std::vector<std::int64_t>, std::span<const float>);
template ArchiveArray make_array<double>(const std::string&, std::vector<std::int64_t>, std::span<const double>);
template void save_checkpoint<float>(const std::filesystem::path&, const TrainConfig&, const ParamLayout&,
                                     const TrainState<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const TrainConfig&, const ParamLayout&,
                                      const TrainState<double>&);
template TrainState<float> load_checkpoint_state<float>(const Archive&, const ParamLayout&);
template TrainState<double> load_checkpoint_state<double>(const Archive&, const ParamLayout&);

}  // namespace tapct
