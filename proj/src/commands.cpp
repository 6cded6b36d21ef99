// SPDX-License-Identifier: Apache-2.0
#include "sdnia/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "sdnia/ablation.hpp"
#include "sdnia/config.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/image.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/log.hpp"
#include "sdnia/model.hpp"
#include "sdnia/stylizer.hpp"
#include "sdnia/training.hpp"

namespace sdnia::commands {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"stylize", "build-dataset", "train", "eval", "detect", "ablate"};
  return names;
}

namespace {

const std::vector<std::string> kRootKeys{"seed",  "run_dir", "resume",  "stylizer", "detector", "data", "train",
                                         "stylize", "build_dataset", "eval", "detect", "ablate"};

/// Output directory plus the list of files written, persisted as run_manifest.json.
class RunDir {
 public:
  RunDir(std::string command, fs::path dir, json config)
      : command_(std::move(command)), dir_(std::move(dir)), config_(std::move(config)) {}

  const fs::path& path() const { return dir_; }

  fs::path create() {
    fs::create_directories(dir_);
    return dir_;
  }

  void add(const fs::path& file) { outputs_.push_back(file); }

  void finish(int code) {
    json j;
    j["command"] = command_;
    j["exit_code"] = code;
    j["config"] = config_;
    j["outputs"] = json::array();
    for (const auto& f : outputs_) {
      std::error_code ec;
      const auto rel = fs::relative(f, dir_, ec);
      j["outputs"].push_back(ec ? f.generic_string() : rel.generic_string());
    }
    fs::create_directories(dir_);
    std::ofstream(dir_ / "run_manifest.json") << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  fs::path dir_;
  json config_;
  std::vector<fs::path> outputs_;
};

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is required");
  if (!fs::exists(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

std::vector<fs::path> path_list(const json& section, const std::string& key, const std::string& where) {
  std::vector<fs::path> out;
  if (!section.contains(key)) return out;
  const auto& v = section.at(key);
  if (v.is_string()) {
    out.emplace_back(v.get<std::string>());
  } else if (v.is_array()) {
    for (const auto& item : v) {
      if (!item.is_string()) throw ConfigError(where + "." + key + " must list paths");
      out.emplace_back(item.get<std::string>());
    }
  } else {
    throw ConfigError(where + "." + key + " must be a path or a list of paths");
  }
  return out;
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

/// Files as given; directories expanded to their image files in name order.
std::vector<fs::path> expand_images(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

stylizer::BackendConfig backend_config(const json& root) {
  const auto s = config::section(root, "stylizer");
  config::check_keys(s, "stylizer", {"backend", "weights"});
  stylizer::BackendConfig c;
  c.name = config::get<std::string>(s, "backend", c.name, "stylizer");
  c.weights = config::get<std::string>(s, "weights", "", "stylizer");
  if (c.name != "procedural" && c.name != "torchscript") throw ConfigError("stylizer.backend must be procedural or torchscript");
  if (c.name == "torchscript") require_file(c.weights, "stylizer.weights");
  return c;
}

detector::DetectorConfig detector_config(const json& root, int num_classes) {
  const auto s = config::section(root, "detector");
  config::check_keys(s, "detector", {"grid_scales", "width", "conf_threshold", "nms_iou_threshold", "anchors"});
  auto c = detector::DetectorConfig::defaults(num_classes,
                                              config::get<std::vector<int>>(s, "grid_scales", {16, 32}, "detector"));
  c.width = config::get<int>(s, "width", c.width, "detector");
  c.conf_threshold = config::get<double>(s, "conf_threshold", c.conf_threshold, "detector");
  c.nms_iou_threshold = config::get<double>(s, "nms_iou_threshold", c.nms_iou_threshold, "detector");
  if (s.contains("anchors")) {
    const auto raw = config::get<std::vector<std::vector<std::vector<double>>>>(s, "anchors", {}, "detector");
    c.anchors.clear();
    for (const auto& list : raw) {
      std::vector<detector::Anchor> anchors;
      for (const auto& wh : list) {
        if (wh.size() != 2) throw ConfigError("detector.anchors entries must be [w, h] pairs");
        anchors.push_back({wh[0], wh[1]});
      }
      c.anchors.push_back(anchors);
    }
  }
  if (c.width < 1) throw ConfigError("detector.width must be >= 1");
  c.validate();
  return c;
}

std::uint64_t root_seed(const json& root) { return config::get<std::uint64_t>(root, "seed", 0, "config"); }

fs::path run_dir_for(const json& root, const std::string& command) {
  return config::get<std::string>(root, "run_dir", "runs/" + command, "config");
}

training::TrainConfig train_config(const json& root) {
  auto s = config::section(root, "train");
  if (!s.contains("seed")) s["seed"] = root_seed(root);
  return training::TrainConfig::from_json(s);
}

imagery::DatasetManifest load_manifest(const fs::path& path, const std::string& what, bool pixels = true) {
  require_file(path, what);
  imagery::LoadReport report;
  auto m = imagery::load_dataset(path, imagery::LoadOptions{pixels}, &report);
  if (report.rejected_entries > 0) {
    log::warn(what, ": ", report.rejected_entries, " entries rejected while loading ", path.string());
  }
  return m;
}

std::vector<stylizer::StyleImage> load_styles(const std::vector<fs::path>& paths) {
  std::vector<stylizer::StyleImage> out;
  for (const auto& p : expand_images(paths)) out.push_back({p.stem().string(), load_image(p)});
  if (out.empty()) throw ConfigError("no style images found");
  return out;
}

std::uint64_t pixel_hash(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < static_cast<std::size_t>(c.numel()) * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

/// Style vectors persisted under SDNIA_CACHE_DIR, keyed like the in-memory cache and guarded by a
/// hash of the source pixels.
class PersistentStyleCache {
 public:
  PersistentStyleCache(const std::string& backend, stylizer::StyleCache& cache) : cache_(cache) {
    const auto dir = config::cache_dir();
    if (dir.empty()) return;
    path_ = dir / ("style_vectors_" + backend + ".json");
    if (!fs::exists(path_)) return;
    try {
      std::ifstream in(path_);
      stored_ = json::parse(in);
    } catch (const std::exception& e) {
      log::warn("ignoring unreadable style cache ", path_.string(), ": ", e.what());
      stored_ = json::object();
    }
  }

  void seed(const std::string& key, const torch::Tensor& pixels) {
    if (path_.empty()) return;
    const auto h = std::to_string(pixel_hash(pixels));
    hashes_[key] = h;
    if (stored_.contains(key) && stored_[key].value("hash", "") == h) {
      cache_.insert(key, stylizer::StyleVector{stored_[key].at("values").get<std::vector<double>>()});
    }
  }

  void save() {
    if (path_.empty()) return;
    for (const auto& [key, vec] : cache_.snapshot()) {
      const auto it = hashes_.find(key);
      if (it == hashes_.end()) continue;
      stored_[key] = {{"hash", it->second}, {"values", vec.values}};
    }
    fs::create_directories(path_.parent_path());
    std::ofstream(path_) << stored_.dump() << "\n";
  }

 private:
  stylizer::StyleCache& cache_;
  fs::path path_;
  json stored_ = json::object();
  std::map<std::string, std::string> hashes_;
};

// ---------------------------------------------------------------------------------------------

int cmd_stylize(const json& root, std::ostream& out, std::ostream& err) {
  const auto s = config::section(root, "stylize");
  config::check_keys(s, "stylize", {"content", "styles", "alphas", "output", "name"});
  const fs::path content_path = config::get<std::string>(s, "content", "", "stylize");
  const auto style_paths = path_list(s, "styles", "stylize");
  const auto alphas = config::get<std::vector<double>>(s, "alphas", {1.0}, "stylize");
  RunDir run("stylize", run_dir_for(root, "stylize"), root);
  const fs::path output = config::get<std::string>(s, "output", (run.path() / "stylized" / "manifest.tsv").string(), "stylize");
  require_file(content_path, "stylize.content");
  if (style_paths.empty()) throw ConfigError("stylize.styles is required");
  for (const auto& p : style_paths) require_file(p, "stylize.styles entry");
  if (alphas.empty()) throw ConfigError("stylize.alphas must not be empty");
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("stylize.alphas: " + std::to_string(a) + " lies outside [0, 1]");
  }
  const auto bcfg = backend_config(root);

  const auto contents = load_manifest(content_path, "stylize.content");
  const auto styles = load_styles(style_paths);
  const auto backend = stylizer::make_backend(bcfg);

  run.create();
  stylizer::StyleCache cache;
  PersistentStyleCache persistent(backend->name(), cache);
  for (const auto& c : contents.entries) persistent.seed("content/" + c.image_id, c.pixels);
  for (const auto& st : styles) persistent.seed("style/" + st.style_id, st.pixels);

  const fs::path image_dir = output.parent_path() / "images";
  stylizer::BatchOptions opts;
  opts.cache = &cache;
  opts.sink = [&](imagery::LabeledImage& img) {
    img.image_path = image_dir / (img.image_id + ".png");
    save_image(img.pixels, img.image_path);
    img.pixels = torch::Tensor();
    run.add(img.image_path);
  };
  auto result = stylizer::batch_stylize(*backend, contents, styles, alphas, opts);
  result.manifest.name = config::get<std::string>(s, "name", contents.name + "_stylized", "stylize");
  imagery::save_dataset(result.manifest, output);
  run.add(output);
  persistent.save();

  out << "stylized " << result.manifest.entries.size() << " images (" << contents.entries.size() << " contents x "
      << styles.size() << " styles x " << alphas.size() << " alphas = " << result.expected << ")\n";
  out << "manifest: " << output.string() << "\n";
  const int code = result.failures > 0 ? kPartial : kOk;
  if (result.failures > 0) {
    err << result.failures << " stylization failures:\n";
    for (const auto& e : result.errors) err << "  " << e << "\n";
  }
  run.finish(code);
  return code;
}

int cmd_build_dataset(const json& root, std::ostream& out, std::ostream&) {
  const auto s = config::section(root, "build_dataset");
  config::check_keys(s, "build_dataset",
                     {"kind", "output", "val_output", "count", "size", "min_objects", "max_objects", "min_extent",
                      "max_extent", "name", "split", "seed", "originals", "stylized", "input", "degradation", "classes",
                      "fraction"});
  const auto kind = config::get<std::string>(s, "kind", "", "build_dataset");
  RunDir run("build-dataset", run_dir_for(root, "build-dataset"), root);
  const fs::path output = config::get<std::string>(s, "output", (run.path() / "dataset" / "manifest.tsv").string(), "build_dataset");
  const auto seed = config::get<std::uint64_t>(s, "seed", root_seed(root), "build_dataset");

  imagery::DatasetManifest result;
  std::optional<imagery::DatasetManifest> val;
  fs::path val_output;
  if (kind == "shapes") {
    imagery::ShapesOptions o;
    o.count = config::get<std::size_t>(s, "count", o.count, "build_dataset");
    o.size = config::get<int64_t>(s, "size", o.size, "build_dataset");
    o.min_objects = config::get<int>(s, "min_objects", o.min_objects, "build_dataset");
    o.max_objects = config::get<int>(s, "max_objects", o.max_objects, "build_dataset");
    o.min_extent = config::get<double>(s, "min_extent", o.min_extent, "build_dataset");
    o.max_extent = config::get<double>(s, "max_extent", o.max_extent, "build_dataset");
    o.name = config::get<std::string>(s, "name", o.name, "build_dataset");
    o.split = imagery::parse_split(config::get<std::string>(s, "split", "train", "build_dataset"));
    o.seed = seed;
    if (o.count < 1 || o.size < 16 || o.min_objects < 0 || o.max_objects < o.min_objects) {
      throw ConfigError("build_dataset: invalid shapes options");
    }
    result = imagery::make_shapes_dataset(o);
  } else if (kind == "mix") {
    const fs::path a = config::get<std::string>(s, "originals", "", "build_dataset");
    const fs::path b = config::get<std::string>(s, "stylized", "", "build_dataset");
    require_file(a, "build_dataset.originals");
    require_file(b, "build_dataset.stylized");
    result = imagery::mix_datasets(load_manifest(a, "build_dataset.originals", false),
                                   load_manifest(b, "build_dataset.stylized", false));
  } else if (kind == "degrade") {
    const fs::path in = config::get<std::string>(s, "input", "", "build_dataset");
    const auto which = config::get<std::string>(s, "degradation", "fog", "build_dataset");
    if (which != "fog" && which != "lowlight") throw ConfigError("build_dataset.degradation must be fog or lowlight");
    require_file(in, "build_dataset.input");
    result = imagery::degrade_dataset(load_manifest(in, "build_dataset.input"),
                                      which == "fog" ? imagery::Origin::fog_synth : imagery::Origin::gamma_synth, seed);
  } else if (kind == "filter") {
    const fs::path in = config::get<std::string>(s, "input", "", "build_dataset");
    const auto classes = config::get<std::vector<std::string>>(s, "classes", {}, "build_dataset");
    require_file(in, "build_dataset.input");
    if (classes.empty()) throw ConfigError("build_dataset.classes must not be empty");
    result = imagery::filter_classes(load_manifest(in, "build_dataset.input", false), classes);
  } else if (kind == "split") {
    const fs::path in = config::get<std::string>(s, "input", "", "build_dataset");
    const auto fraction = config::get<double>(s, "fraction", 0.1, "build_dataset");
    require_file(in, "build_dataset.input");
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("build_dataset.fraction must lie in (0, 1)");
    val_output = config::get<std::string>(s, "val_output", (output.parent_path() / "val_manifest.tsv").string(), "build_dataset");
    auto [train, v] = imagery::split_validation(load_manifest(in, "build_dataset.input", false), fraction, seed);
    result = std::move(train);
    val = std::move(v);
  } else {
    throw ConfigError("build_dataset.kind must be one of shapes, mix, degrade, filter, split");
  }
  if (s.contains("name") && kind != "shapes") result.name = s.at("name").get<std::string>();

  run.create();
  imagery::save_dataset(result, output);
  run.add(output);
  out << "wrote " << result.entries.size() << " entries to " << output.string() << "\n";
  if (val) {
    imagery::save_dataset(*val, val_output);
    run.add(val_output);
    out << "wrote " << val->entries.size() << " entries to " << val_output.string() << "\n";
  }
  run.finish(kOk);
  return kOk;
}

int cmd_train(const json& root, std::ostream& out, std::ostream&) {
  const auto data = config::section(root, "data");
  config::check_keys(data, "data", {"train", "val"});
  const auto cfg = train_config(root);
  const fs::path train_path = config::get<std::string>(data, "train", "", "data");
  const fs::path val_path = config::get<std::string>(data, "val", "", "data");
  const bool resume = config::get<bool>(root, "resume", false, "config");
  require_file(train_path, "data.train");
  if (!val_path.empty()) require_file(val_path, "data.val");

  auto train_set = load_manifest(train_path, "data.train");
  imagery::DatasetManifest val_set;
  if (val_path.empty()) {
    std::tie(train_set, val_set) = imagery::split_validation(train_set, cfg.val_fraction, cfg.seed);
  } else {
    val_set = load_manifest(val_path, "data.val");
    if (val_set.class_names != train_set.class_names) throw ConfigError("data.val lists different classes than data.train");
  }
  const auto det = detector_config(root, static_cast<int>(train_set.class_names.size()));
  if (cfg.image_size % det.max_scale() != 0) {
    throw ConfigError("train.image_size must be a multiple of " + std::to_string(det.max_scale()));
  }

  RunDir run("train", run_dir_for(root, "train"), root);
  run.create();
  training::TrainOptions opts;
  opts.run_dir = run.path();
  opts.resume = resume;
  int code = kOk;
  try {
    const auto result = training::train(cfg, det, train_set, val_set, opts);
    out << "epochs run: " << result.state.epoch << (result.early_stopped ? " (early stop)" : "") << "\n";
    char line[128];
    std::snprintf(line, sizeof(line), "final val mAP@.5: %.4f (epoch %d)\n", result.state.best_val_metric,
                  result.state.best_epoch);
    out << line;
  } catch (const DivergenceError&) {
    code = kRuntime;
    for (const char* f : {"best.ckpt", "last.ckpt", "history.jsonl"}) {
      if (fs::exists(run.path() / f)) run.add(run.path() / f);
    }
    run.finish(code);
    throw;
  }
  for (const char* f : {"best.ckpt", "last.ckpt", "history.jsonl", "steps.jsonl"}) {
    if (fs::exists(run.path() / f)) run.add(run.path() / f);
  }
  run.finish(code);
  return code;
}

int cmd_eval(const json& root, std::ostream& out, std::ostream&) {
  const auto s = config::section(root, "eval");
  config::check_keys(s, "eval", {"checkpoint", "test", "detections", "latency", "latency_sizes", "conf_threshold",
                                 "image_size", "latency_runs"});
  const fs::path ckpt = config::get<std::string>(s, "checkpoint", "", "eval");
  const fs::path dets_path = config::get<std::string>(s, "detections", "", "eval");
  const auto tests = path_list(s, "test", "eval");
  const bool latency = config::get<bool>(s, "latency", false, "eval");
  const double conf = config::get<double>(s, "conf_threshold", 0.01, "eval");
  const int latency_runs = config::get<int>(s, "latency_runs", 10, "eval");
  if (tests.empty()) throw ConfigError("eval.test is required");
  for (const auto& t : tests) require_file(t, "eval.test entry");
  if (dets_path.empty()) {
    require_file(ckpt, "eval.checkpoint");
  } else {
    require_file(dets_path, "eval.detections");
    if (tests.size() != 1) throw ConfigError("eval.detections pairs with exactly one test set");
    if (latency) throw ConfigError("eval.latency needs a checkpoint, not a detections file");
  }
  if (!(conf >= 0.0 && conf <= 1.0)) throw ConfigError("eval.conf_threshold must lie in [0, 1]");

  std::optional<LoadedModel> loaded;
  int64_t image_size = 544;
  if (dets_path.empty()) {
    loaded = load_model(ckpt);
    if (loaded->meta.contains("train_config")) image_size = loaded->meta["train_config"].value("image_size", 544);
  }
  image_size = config::get<int64_t>(s, "image_size", image_size, "eval");
  std::vector<imagery::DatasetManifest> sets;
  for (const auto& t : tests) {
    sets.push_back(load_manifest(t, "eval.test"));
    if (loaded && sets.back().class_names != loaded->class_names) {
      std::string a, b;
      for (const auto& n : loaded->class_names) a += (a.empty() ? "" : ",") + n;
      for (const auto& n : sets.back().class_names) b += (b.empty() ? "" : ",") + n;
      throw ConfigError("class universe mismatch: checkpoint was trained on [" + a + "] but test set '" +
                        sets.back().name + "' lists [" + b + "]");
    }
  }
  const auto latency_sizes = config::get<std::vector<int64_t>>(s, "latency_sizes", {image_size}, "eval");
  if (loaded && image_size % loaded->model->config().max_scale() != 0) {
    throw ConfigError("eval.image_size must be a multiple of " + std::to_string(loaded->model->config().max_scale()));
  }

  RunDir run("eval", run_dir_for(root, "eval"), root);
  run.create();
  std::vector<evaluation::EvalReport> reports;
  for (const auto& set : sets) {
    evaluation::EvalReport r;
    if (loaded) {
      r = evaluation::evaluate_model(loaded->model, set, image_size, conf);
    } else {
      r = evaluation::map_range(evaluation::pair_detections(set, evaluation::read_detections(dets_path)),
                                set.class_names);
      r.test_set = set.name;
    }
    reports.push_back(std::move(r));
  }
  if (latency) {
    for (auto sz : latency_sizes) {
      reports.front().latency.push_back(evaluation::measure_model_latency(loaded->model, sz, 3, latency_runs));
    }
  }

  json all = json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto base = run.path() / "eval" / (std::to_string(i) + "_" + reports[i].test_set);
    fs::create_directories(base.parent_path());
    std::ofstream(base.string() + ".json") << reports[i].to_json().dump(2) << "\n";
    std::ofstream(base.string() + ".txt") << reports[i].to_text();
    run.add(base.string() + ".json");
    run.add(base.string() + ".txt");
    all.push_back(reports[i].to_json());
  }
  std::ofstream(run.path() / "report.json") << all.dump(2) << "\n";
  run.add(run.path() / "report.json");

  std::vector<std::string> columns;
  for (const auto& r : reports) columns.push_back(r.test_set);
  const std::string row = loaded ? ckpt.stem().string() : dets_path.stem().string();
  out << evaluation::render_table({row}, columns, [&](std::size_t, std::size_t c) {
    return std::optional<std::pair<double, double>>({reports[c].map_50, reports[c].map_50_95});
  });
  for (const auto& r : reports) {
    char line[128];
    std::snprintf(line, sizeof(line), "%s: mAP@.5 = %.4f, mAP@.5:.95 = %.4f\n", r.test_set.c_str(), r.map_50, r.map_50_95);
    out << line;
  }
  for (const auto& l : reports.front().latency) {
    char line[200];
    std::snprintf(line, sizeof(line),
                  "latency %lldx%lld: SDNIA %.2f ms, detector-only %.2f ms, NIA overhead %.2f ms (p95 %.2f / %.2f)\n",
                  static_cast<long long>(l.input_size), static_cast<long long>(l.input_size), l.sdnia.mean_ms,
                  l.detector_only.mean_ms, l.nia_overhead_ms, l.sdnia.p95_ms, l.detector_only.p95_ms);
    out << line;
  }
  run.finish(kOk);
  return kOk;
}

cv::Mat to_bgr_mat(const torch::Tensor& img) {
  const auto u8 = (img.detach().to(torch::kFloat32).clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3, u8.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

int cmd_detect(const json& root, std::ostream& out, std::ostream& err) {
  const auto s = config::section(root, "detect");
  config::check_keys(s, "detect", {"checkpoint", "images", "conf_threshold", "image_size"});
  const fs::path ckpt = config::get<std::string>(s, "checkpoint", "", "detect");
  const auto inputs = path_list(s, "images", "detect");
  require_file(ckpt, "detect.checkpoint");
  if (inputs.empty()) throw ConfigError("detect.images is required");
  auto loaded = load_model(ckpt);
  int64_t image_size = 544;
  if (loaded.meta.contains("train_config")) image_size = loaded.meta["train_config"].value("image_size", 544);
  image_size = config::get<int64_t>(s, "image_size", image_size, "detect");
  const double conf = config::get<double>(s, "conf_threshold", loaded.model->config().conf_threshold, "detect");
  if (image_size % loaded.model->config().max_scale() != 0) {
    throw ConfigError("detect.image_size must be a multiple of " + std::to_string(loaded.model->config().max_scale()));
  }
  if (!(conf >= 0.0 && conf <= 1.0)) throw ConfigError("detect.conf_threshold must lie in [0, 1]");

  RunDir run("detect", run_dir_for(root, "detect"), root);
  const auto out_dir = run.create() / "detect";
  fs::create_directories(out_dir);
  std::vector<evaluation::ImageResult> records;
  std::size_t skipped = 0;
  for (const auto& path : expand_images(inputs)) {
    torch::Tensor img;
    try {
      img = load_image(path);
    } catch (const std::exception& e) {
      log::warn("detect: skipping ", path.string(), ": ", e.what());
      ++skipped;
      continue;
    }
    const auto stem = path.stem().string();
    const auto input = resize_square(img, image_size).unsqueeze(0);
    torch::Tensor adapted;
    {
      torch::NoGradGuard no_grad;
      loaded.model->eval();
      adapted = loaded.model->adapt(input);
    }
    auto dets = loaded.model->detect(input, conf)[0];
    const auto adapted_full = torch::nn::functional::interpolate(
        adapted, torch::nn::functional::InterpolateFuncOptions()
                     .size(std::vector<int64_t>{img.size(1), img.size(2)})
                     .mode(torch::kBilinear)
                     .align_corners(false))[0];
    save_image(adapted_full, out_dir / (stem + "_adapted.png"));
    run.add(out_dir / (stem + "_adapted.png"));

    auto overlay = to_bgr_mat(adapted_full);
    const double W = static_cast<double>(img.size(2)), H = static_cast<double>(img.size(1));
    for (const auto& d : dets) {
      const cv::Point p1(static_cast<int>(d.box.x1() * W), static_cast<int>(d.box.y1() * H));
      const cv::Point p2(static_cast<int>(d.box.x2() * W), static_cast<int>(d.box.y2() * H));
      cv::rectangle(overlay, p1, p2, cv::Scalar(0, 255, 0), 1);
      char label[96];
      const auto& name = static_cast<std::size_t>(d.class_id) < loaded.class_names.size() ? loaded.class_names[d.class_id]
                                                                                          : std::to_string(d.class_id);
      std::snprintf(label, sizeof(label), "%s %.2f", name.c_str(), d.confidence);
      cv::putText(overlay, label, cv::Point(p1.x, std::max(p1.y - 2, 8)), cv::FONT_HERSHEY_PLAIN, 0.8,
                  cv::Scalar(0, 255, 0), 1);
    }
    cv::imwrite((out_dir / (stem + "_overlay.png")).string(), overlay);
    run.add(out_dir / (stem + "_overlay.png"));
    out << stem << ": " << dets.size() << " detections\n";
    records.push_back({stem, std::move(dets), {}});
  }
  evaluation::write_detections(run.path() / "detections.jsonl", records);
  run.add(run.path() / "detections.jsonl");
  const int code = skipped > 0 ? kPartial : kOk;
  if (skipped > 0) err << skipped << " images could not be read\n";
  run.finish(code);
  return code;
}

int cmd_ablate(const json& root, std::ostream& out, std::ostream& err) {
  const auto s = config::section(root, "ablate");
  config::check_keys(s, "ablate", {"grid", "originals", "styles", "test"});
  const auto grid = ablation::grid_by_name(config::get<std::string>(s, "grid", "table6", "ablate"));
  const fs::path originals = config::get<std::string>(s, "originals", "", "ablate");
  const auto style_paths = path_list(s, "styles", "ablate");
  const auto tests = path_list(s, "test", "ablate");
  const bool resume = config::get<bool>(root, "resume", false, "config");
  const auto cfg = train_config(root);
  const auto bcfg = backend_config(root);
  require_file(originals, "ablate.originals");
  if (tests.empty()) throw ConfigError("ablate.test is required");
  for (const auto& t : tests) require_file(t, "ablate.test entry");
  for (const auto& p : style_paths) require_file(p, "ablate.styles entry");
  bool needs_styles = false;
  for (const auto& v : grid.variants) needs_styles = needs_styles || v.use_stylized_data;
  if (needs_styles && style_paths.empty()) throw ConfigError("ablate.styles is required for grid " + grid.name);

  ablation::AblationContext ctx;
  ctx.base = cfg;
  ctx.originals = load_manifest(originals, "ablate.originals");
  ctx.detector = detector_config(root, static_cast<int>(ctx.originals.class_names.size()));
  if (cfg.image_size % ctx.detector.max_scale() != 0) {
    throw ConfigError("train.image_size must be a multiple of " + std::to_string(ctx.detector.max_scale()));
  }
  for (const auto& t : tests) {
    auto m = load_manifest(t, "ablate.test");
    if (m.class_names != ctx.originals.class_names) throw ConfigError("test set '" + m.name + "' lists different classes");
    ctx.test_sets.push_back({m.name, std::move(m)});
  }
  if (needs_styles) ctx.styles = load_styles(style_paths);
  std::unique_ptr<stylizer::StylizerBackend> backend;
  if (needs_styles) backend = stylizer::make_backend(bcfg);
  ctx.backend = backend.get();

  RunDir run("ablate", run_dir_for(root, "ablate"), root);
  ctx.work_dir = run.create() / "cells";
  ctx.resume = resume;
  const auto report = ablation::run_ablation(grid, ctx);
  const auto base = run.path() / ("ablation_" + grid.name);
  std::ofstream(base.string() + ".json") << report.to_json().dump(2) << "\n";
  std::ofstream(base.string() + ".txt") << report.to_text();
  run.add(base.string() + ".json");
  run.add(base.string() + ".txt");
  out << report.to_text();
  const int code = report.failed_cells() > 0 ? kPartial : kOk;
  if (code != kOk) err << report.failed_cells() << " ablation cells failed\n";
  run.finish(code);
  return code;
}

}  // namespace

int run(const std::string& command, const json& config, std::ostream& out, std::ostream& err) {
  try {
    if (!config.is_object()) throw ConfigError("config must be a JSON object");
    config::check_keys(config, "config", kRootKeys);
    if (command == "stylize") return cmd_stylize(config, out, err);
    if (command == "build-dataset") return cmd_build_dataset(config, out, err);
    if (command == "train") return cmd_train(config, out, err);
    if (command == "eval") return cmd_eval(config, out, err);
    if (command == "detect") return cmd_detect(config, out, err);
    if (command == "ablate") return cmd_ablate(config, out, err);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const ArgumentError& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kValidation;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace sdnia::commands
