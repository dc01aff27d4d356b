// SPDX-License-Identifier: Apache-2.0
//
// tapct: synthetic data, pretraining, frozen-feature evaluation and retrieval.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tapct/checkpoint.hpp"
#include "tapct/config.hpp"
#include "tapct/eval.hpp"
#include "tapct/metrics.hpp"
#include "tapct/retrieval.hpp"
#include "tapct/trainer.hpp"
#include "tapct/volcore.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--seed", c.seed, "Seed for every random draw")->capture_default_str();
  sub->add_flag("--deterministic", c.deterministic, "64-bit, reproducible execution");
  auto* o = sub->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
}

void write_run_json(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                    const json& resolved) {
  fs::create_directories(dir);
  const json j = {{"command", command},
                  {"argv", argv},
                  {"config", resolved},
                  {"version", TAPCT_VERSION},
                  {"git", TAPCT_GIT_REV}};
  std::ofstream os(dir / "run.json", std::ios::trunc);
  if (!os) throw tapct::IoError("cannot write " + (dir / "run.json").string());
  os << j.dump(2) << '\n';
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw tapct::IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json config_json(const tapct::Config& c) {
  json j = json::object();
  for (const auto& [k, v] : c.values()) j[k] = v;
  return j;
}

tapct::Extent3 extent_arg(const std::string& s, const char* flag) {
  try {
    return tapct::parse_extent(s);
  } catch (const tapct::ValidationError& e) {
    throw tapct::ValidationError(std::string(flag) + ": " + e.what());
  }
}

std::vector<fs::path> field_stems(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw tapct::ValidationError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  const std::string suffix = ".emb.json";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
      out.push_back(dir / name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw tapct::ValidationError("no embedding fields in " + dir.string());
  return out;
}

// Held-out split: the last `n_test` items in sorted order.
std::size_t split_point(std::size_t n, int n_test) {
  const int t = n_test >= 0 ? n_test : std::max(1, static_cast<int>(n) / 4);
  if (t < 1 || static_cast<std::size_t>(t) >= n) {
    throw tapct::ValidationError("need at least one training and one test item, got " + std::to_string(n) +
                                 " items and --test " + std::to_string(t));
  }
  return n - static_cast<std::size_t>(t);
}

// --------------------------------------------------------------------------

int run_synth(const Common& c, int n, const std::string& shape, int blobs, const std::vector<std::string>& argv) {
  if (n < 1) throw tapct::ValidationError("--n must be >= 1");
  const tapct::Extent3 ext = extent_arg(shape, "--shape");
  const fs::path out(c.out);
  fs::create_directories(out / "images");
  fs::create_directories(out / "labels");
  for (int i = 0; i < n; ++i) {
    const std::uint64_t s = tapct::Rng::derive(c.seed, {0x5e7dULL, static_cast<std::uint64_t>(i)}).next_u64();
    tapct::Phantom p = tapct::synth_volume(s, ext, blobs);
    char name[32];
    std::snprintf(name, sizeof(name), "phantom_%04d", i);
    p.volume.id = name;
    tapct::save_volume(p.volume, out / "images" / name);
    tapct::save_labels(p.labels, out / "labels" / name);
  }
  write_run_json(out, "synth", argv,
                 {{"n", n}, {"shape", tapct::format_extent(ext)}, {"blobs", blobs}, {"seed", c.seed}});
  std::cout << "wrote " << n << " phantoms to " << out.string() << '\n';
  return 0;
}

int run_stats(const Common& c, const std::string& in, double fg, const std::vector<std::string>& argv) {
  const auto volumes = tapct::load_training_volumes(in);
  const tapct::NormStats s = tapct::compute_foreground_stats(volumes, fg);
  json j = {{"mean", s.mean}, {"std", s.std}, {"clip_min", s.clip_min}, {"clip_max", s.clip_max},
            {"n_volumes", volumes.size()}, {"fg_threshold", fg}};
  json sums = json::object();
  for (const auto& v : volumes) sums[v.id] = tapct::checksum(v);
  j["checksums"] = sums;
  if (!c.out.empty()) {
    write_run_json(c.out, "stats", argv, {{"in", in}, {"fg_threshold", fg}});
    write_json_file(fs::path(c.out) / "stats.json", j);
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_pretrain(const Common& c, const std::string& config_path, const std::string& resume,
                 const std::vector<std::string>& sets, bool seed_given, const std::vector<std::string>& argv) {
  tapct::Config cfg;
  if (!config_path.empty()) cfg = tapct::Config::load(config_path);
  for (const auto& s : sets) cfg.set_assignment(s);
  if (seed_given) cfg.set("train.seed", std::to_string(c.seed));
  if (c.deterministic) cfg.set("train.deterministic", "true");
  const tapct::TrainConfig tc = tapct::TrainConfig::from_config(cfg);
  const tapct::Config resolved = tc.to_config();
  const fs::path out(c.out);
  write_run_json(out, "pretrain", argv, config_json(resolved));
  {
    std::ofstream os(out / "config.cfg", std::ios::trunc);
    os << resolved.to_text();
  }
  std::optional<fs::path> r;
  if (!resume.empty()) r = fs::path(resume);
  const auto log_every = std::max<std::int64_t>(1, tc.log_every);
  const auto result = tapct::pretrain(tc, out, r, [&](const tapct::StepMetrics& m) {
    if ((m.iter + 1) % log_every == 0 || m.iter + 1 == tc.total_iterations) {
      std::cout << "iter " << m.iter + 1 << "/" << tc.total_iterations << " loss " << m.loss_total
                << " dino " << m.loss_dino << " ibot " << m.loss_ibot << " koleo " << m.loss_koleo
                << " lr " << m.lr << '\n';
    }
  });
  std::cout << "checkpoint " << result.checkpoint.string() << '\n';
  return 0;
}

int run_embed(const Common& c, const std::string& ckpt, const std::string& in, const std::string& window_s,
              const std::string& stride_s, bool student, bool random_init, bool seed_given,
              const std::vector<std::string>& argv) {
  const tapct::Archive archive = tapct::read_archive(ckpt);
  tapct::FrozenBackbone backbone = [&] {
    if (!random_init) return tapct::load_backbone(ckpt, !student);
    tapct::TrainConfig tc = tapct::checkpoint_config(archive);
    if (seed_given) tc.seed = c.seed;
    return tapct::random_backbone(tc, tapct::load_backbone(ckpt).norm());
  }();
  const tapct::Extent3 window = window_s.empty() ? backbone.window() : extent_arg(window_s, "--window");
  const tapct::Extent3 stride = stride_s.empty() ? window : extent_arg(stride_s, "--stride");
  const auto stems = tapct::list_containers(in, "f32le");
  if (stems.empty()) throw tapct::ValidationError("no f32le volumes in " + in);
  const fs::path out(c.out);
  write_run_json(out, "embed", argv,
                 {{"ckpt", ckpt}, {"in", in}, {"window", tapct::format_extent(window)},
                  {"stride", tapct::format_extent(stride)}, {"student", student}, {"random", random_init},
                  {"seed", c.seed}});
  const tapct::FrozenEncoder enc = tapct::make_encoder(backbone);
  for (const auto& stem : stems) {
    const tapct::Volume v = tapct::normalize(tapct::load_volume(stem), backbone.norm());
    const auto field = tapct::extract_embeddings(enc, v, window, stride, backbone.config().patch);
    tapct::save_field(field, out / stem.filename());
  }
  std::cout << "embedded " << stems.size() << " volumes into " << out.string() << '\n';
  return 0;
}

int run_eval_seg(const Common& c, const std::string& emb_dir, const std::string& labels_dir,
                 const std::string& classes, int n_classes, int n_test, tapct::SegTrainConfig sc,
                 const std::vector<std::string>& argv) {
  sc.seed = c.seed;
  std::optional<std::map<int, int>> remap;
  if (!classes.empty()) remap = tapct::load_label_remap(classes);
  const auto stems = field_stems(emb_dir);
  std::vector<tapct::EmbeddingField> fields;
  std::vector<tapct::LabelMap> labels;
  int max_class = 0;
  for (const auto& stem : stems) {
    fields.push_back(tapct::load_field(stem));
    tapct::LabelMap l = tapct::load_labels(fs::path(labels_dir) / stem.filename());
    if (remap) {
      l.remap = remap;
      l = l.applied();
    }
    for (auto v : l.labels.values()) max_class = std::max<int>(max_class, v);
    labels.push_back(std::move(l));
  }
  if (n_classes <= 0) n_classes = max_class + 1;
  const std::size_t cut = split_point(fields.size(), n_test);
  const std::vector<tapct::EmbeddingField> train_f(fields.begin(), fields.begin() + static_cast<std::ptrdiff_t>(cut));
  const std::vector<tapct::LabelMap> train_l(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(cut));
  double final_loss = 0.0;
  const tapct::SegHead head = tapct::train_seg(train_f, train_l, n_classes, sc, &final_loss);
  json per_volume = json::array();
  double sum = 0.0;
  for (std::size_t i = cut; i < fields.size(); ++i) {
    const double d = tapct::dice_macro(tapct::predict_seg(head, fields[i]), labels[i], n_classes);
    per_volume.push_back({{"id", stems[i].filename().string()}, {"dice_macro", d}});
    sum += d;
  }
  const json result = {{"dice_macro", sum / static_cast<double>(fields.size() - cut)},
                       {"n_train", cut},
                       {"n_test", fields.size() - cut},
                       {"n_classes", n_classes},
                       {"final_train_loss", final_loss},
                       {"per_volume", per_volume}};
  if (!c.out.empty()) {
    write_run_json(c.out, "eval-seg", argv,
                   {{"embeddings", emb_dir}, {"labels", labels_dir}, {"classes", classes},
                    {"n_classes", n_classes}, {"test", fields.size() - cut}, {"epochs", sc.epochs},
                    {"lr", sc.lr}, {"accum", sc.accum}, {"seed", c.seed}});
    write_json_file(fs::path(c.out) / "metrics.json", result);
  }
  std::cout << result.dump(2) << '\n';
  return 0;
}

struct CsvLabels {
  std::vector<std::string> names;
  std::map<std::string, std::vector<int>> rows;
};

CsvLabels read_label_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw tapct::ValidationError("missing file " + path.string());
  CsvLabels out;
  std::string line;
  bool header = true;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw tapct::ValidationError(path.string() + ":" + std::to_string(line_no) + ": need id and labels");
    if (header) {
      out.names.assign(cells.begin() + 1, cells.end());
      header = false;
      continue;
    }
    if (cells.size() != out.names.size() + 1) {
      throw tapct::ValidationError(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
    }
    std::vector<int> v;
    for (std::size_t k = 1; k < cells.size(); ++k) {
      if (cells[k] != "0" && cells[k] != "1") {
        throw tapct::ValidationError(path.string() + ":" + std::to_string(line_no) + ": labels must be 0 or 1");
      }
      v.push_back(cells[k] == "1");
    }
    out.rows[cells[0]] = v;
  }
  if (out.rows.empty()) throw tapct::ValidationError("no label rows in " + path.string());
  return out;
}

int run_eval_cls(const Common& c, const std::string& bags_dir, const std::string& labels_csv,
                 const std::string& metric, const std::string& bag_kind, int n_test, tapct::ClsTrainConfig cc,
                 const std::vector<std::string>& argv) {
  cc.seed = c.seed;
  const CsvLabels csv = read_label_csv(labels_csv);
  const auto stems = field_stems(bags_dir);
  std::vector<tapct::Mat<double>> bags;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> rows;
  for (const auto& stem : stems) {
    const std::string id = stem.filename().string();
    const auto it = csv.rows.find(id);
    if (it == csv.rows.end()) continue;
    const tapct::EmbeddingField f = tapct::load_field(stem);
    if (bag_kind == "cls") {
      if (f.cls.rows() == 0) throw tapct::ValidationError("field " + id + " has no CLS embeddings");
      bags.push_back(f.cls.cast<double>());
    } else {
      bags.push_back(f.values.cast<double>());
    }
    ids.push_back(id);
    rows.push_back(it->second);
  }
  if (bags.empty()) throw tapct::ValidationError("no bag ids match the label file");
  const std::size_t cut = split_point(bags.size(), n_test);
  const auto n_out = static_cast<Eigen::Index>(csv.names.size());
  tapct::Mat<int> train_labels(static_cast<Eigen::Index>(cut), n_out);
  tapct::Mat<int> test_labels(static_cast<Eigen::Index>(bags.size() - cut), n_out);
  for (std::size_t i = 0; i < bags.size(); ++i)
    for (Eigen::Index j = 0; j < n_out; ++j) {
      if (i < cut) train_labels(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
      else test_labels(static_cast<Eigen::Index>(i - cut), j) = rows[i][static_cast<std::size_t>(j)];
    }
  std::vector<std::string> warnings;
  const std::vector<tapct::Mat<double>> train_bags(bags.begin(), bags.begin() + static_cast<std::ptrdiff_t>(cut));
  const tapct::AbmilHead head = tapct::train_cls(train_bags, train_labels, cc, &warnings);
  tapct::Mat<double> scores(test_labels.rows(), n_out);
  for (std::size_t i = cut; i < bags.size(); ++i) {
    scores.row(static_cast<Eigen::Index>(i - cut)) = tapct::abmil_forward(head, bags[i]).logits;
  }
  const double value = metric == "auc" ? tapct::micro_auc(scores, test_labels, &warnings)
                                       : tapct::micro_average_precision(scores, test_labels, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  const json result = {{"metric", metric}, {"value", value}, {"bag", bag_kind}, {"n_train", cut},
                       {"n_test", bags.size() - cut}, {"labels", csv.names}, {"warnings", warnings}};
  if (!c.out.empty()) {
    write_run_json(c.out, "eval-cls", argv,
                   {{"bags", bags_dir}, {"labels", labels_csv}, {"metric", metric}, {"bag", bag_kind},
                    {"test", bags.size() - cut}, {"epochs", cc.epochs}, {"lr", cc.lr}, {"accum", cc.accum},
                    {"hidden", cc.hidden}, {"seed", c.seed}});
    write_json_file(fs::path(c.out) / "metrics.json", result);
  }
  std::cout << result.dump(2) << '\n';
  return 0;
}

int run_retrieve(const Common& c, const std::string& ckpt, const std::string& scan_a, const std::string& mask_a,
                 const std::string& scan_b, int topk, const std::string& window_s, bool overlay,
                 const std::vector<std::string>& argv) {
  const tapct::FrozenBackbone backbone = tapct::load_backbone(ckpt);
  const tapct::Extent3 window = window_s.empty() ? backbone.window() : extent_arg(window_s, "--window");
  const tapct::FrozenEncoder enc = tapct::make_encoder(backbone);
  const auto embed = [&](const std::string& p) {
    return tapct::extract_embeddings(enc, tapct::normalize(tapct::load_volume(p), backbone.norm()), window, window,
                                     backbone.config().patch, false);
  };
  const tapct::EmbeddingField fa = embed(scan_a);
  const tapct::EmbeddingField fb = embed(scan_b);
  const auto matches = tapct::retrieve(fa, tapct::load_labels(mask_a), fb, topk);
  json list = json::array();
  for (const auto& m : matches) {
    list.push_back({{"rank", m.rank},
                    {"cell", m.cell},
                    {"cell_index", {m.cell_index.z, m.cell_index.y, m.cell_index.x}},
                    {"voxel", m.voxel},
                    {"score", m.score}});
  }
  const json result = {{"scan_a", scan_a}, {"scan_b", scan_b}, {"matches", list}};
  const fs::path out(c.out);
  write_run_json(out, "retrieve", argv,
                 {{"ckpt", ckpt}, {"scan_a", scan_a}, {"mask_a", mask_a}, {"scan_b", scan_b}, {"topk", topk},
                  {"window", tapct::format_extent(window)}, {"overlay", overlay}});
  write_json_file(out / "matches.json", result);
  if (overlay) tapct::save_labels(tapct::match_overlay(fb, matches), out / "overlay_b");
  std::cout << result.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"tapct: volumetric self-supervised pretraining and frozen-feature evaluation"};
  app.set_version_flag("--version", std::string(TAPCT_VERSION) + " (" + TAPCT_GIT_REV + ")");
  app.require_subcommand(1);

  Common c;

  auto* synth = app.add_subcommand("synth", "Generate synthetic phantoms with label maps");
  int n = 16, blobs = 5;
  std::string shape = "16,64,64";
  synth->add_option("--n", n, "Number of phantoms")->capture_default_str();
  synth->add_option("--shape", shape, "Volume extents z,y,x")->capture_default_str();
  synth->add_option("--blobs", blobs, "Organs per phantom")->capture_default_str();
  add_common(synth, c);

  auto* stats = app.add_subcommand("stats", "Foreground intensity statistics of a volume directory");
  std::string stats_in;
  double fg = -800.0;
  stats->add_option("--in", stats_in, "Volume directory")->required();
  stats->add_option("--fg-threshold", fg, "Foreground intensity threshold")->capture_default_str();
  add_common(stats, c, false);

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  std::string config_path, resume;
  std::vector<std::string> sets;
  pre->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  pre->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  pre->add_option("--set", sets, "Config override key=value (repeatable)");
  add_common(pre, c);

  auto* emb = app.add_subcommand("embed", "Extract sliding-window embedding fields");
  std::string ckpt, emb_in, window_s, stride_s;
  bool student = false, random_init = false;
  emb->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  emb->add_option("--in", emb_in, "Volume directory")->required();
  emb->add_option("--window", window_s, "Window z,y,x (default: pretraining global view)");
  emb->add_option("--stride", stride_s, "Stride z,y,x (default: window)");
  emb->add_flag("--student", student, "Use the student instead of the teacher backbone");
  emb->add_flag("--random-init", random_init, "Randomly initialized backbone with the checkpoint's architecture");
  add_common(emb, c);

  auto* seg = app.add_subcommand("eval-seg", "Linear segmentation probe on frozen embeddings");
  std::string seg_emb, seg_labels, seg_classes;
  int n_classes = 0, seg_test = -1;
  tapct::SegTrainConfig sc;
  seg->add_option("--embeddings", seg_emb, "Embedding field directory")->required();
  seg->add_option("--labels", seg_labels, "Label map directory")->required();
  seg->add_option("--classes", seg_classes, "Label remap JSON {original_id: merged_id}");
  seg->add_option("--n-classes", n_classes, "Class count including background (default: max label + 1)");
  seg->add_option("--test", seg_test, "Held-out volumes, last in sorted order (default: a quarter)");
  seg->add_option("--epochs", sc.epochs)->capture_default_str();
  seg->add_option("--lr", sc.lr)->capture_default_str();
  seg->add_option("--accum", sc.accum)->capture_default_str();
  add_common(seg, c, false);

  auto* cls = app.add_subcommand("eval-cls", "Attention-MIL classification on frozen embeddings");
  std::string cls_bags, cls_labels, metric = "auc", bag_kind = "cls";
  int cls_test = -1;
  tapct::ClsTrainConfig cc;
  cls->add_option("--bags", cls_bags, "Embedding field directory")->required();
  cls->add_option("--labels", cls_labels, "CSV: id,label... with a header row")->required();
  cls->add_option("--metric", metric)->check(CLI::IsMember({"auc", "ap"}))->capture_default_str();
  cls->add_option("--bag", bag_kind)->check(CLI::IsMember({"cls", "patch"}))->capture_default_str();
  cls->add_option("--test", cls_test, "Held-out bags, last in sorted order (default: a quarter)");
  cls->add_option("--epochs", cc.epochs)->capture_default_str();
  cls->add_option("--lr", cc.lr)->capture_default_str();
  cls->add_option("--accum", cc.accum)->capture_default_str();
  cls->add_option("--hidden", cc.hidden)->capture_default_str();
  add_common(cls, c, false);

  auto* ret = app.add_subcommand("retrieve", "Lesion-to-scan retrieval");
  std::string ret_ckpt, scan_a, mask_a, scan_b, ret_window;
  int topk = 20;
  bool overlay = false;
  ret->add_option("--ckpt", ret_ckpt)->required()->check(CLI::ExistingFile);
  ret->add_option("--scan-a", scan_a)->required();
  ret->add_option("--mask-a", mask_a)->required();
  ret->add_option("--scan-b", scan_b)->required();
  ret->add_option("--topk", topk)->capture_default_str();
  ret->add_option("--window", ret_window, "Window z,y,x (default: pretraining global view)");
  ret->add_flag("--overlay", overlay, "Also write a rank overlay label map for scan b");
  add_common(ret, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    if (app.get_subcommands().empty()) std::cerr << '\n' << app.help();
    return 1;
  }

  try {
    if (*synth) return run_synth(c, n, shape, blobs, args);
    if (*stats) return run_stats(c, stats_in, fg, args);
    if (*pre) return run_pretrain(c, config_path, resume, sets, pre->count("--seed") > 0, args);
    if (*emb) {
      return run_embed(c, ckpt, emb_in, window_s, stride_s, student, random_init, emb->count("--seed") > 0, args);
    }
    if (*seg) return run_eval_seg(c, seg_emb, seg_labels, seg_classes, n_classes, seg_test, sc, args);
    if (*cls) return run_eval_cls(c, cls_bags, cls_labels, metric, bag_kind, cls_test, cc, args);
    if (*ret) return run_retrieve(c, ret_ckpt, scan_a, mask_a, scan_b, topk, ret_window, overlay, args);
  } catch (const tapct::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const tapct::RuntimeFailure& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
