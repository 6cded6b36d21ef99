// SPDX-License-Identifier: Apache-2.0
#include "sdnia/imagery.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sdnia/errors.hpp"
#include "sdnia/image.hpp"
#include "sdnia/log.hpp"

namespace fs = std::filesystem;

namespace sdnia::imagery {

BoundingBox BoundingBox::from_corners(int class_id, double x1, double y1, double x2, double y2) {
  return BoundingBox{class_id, 0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

std::optional<BoundingBox> BoundingBox::clipped() const {
  const double lx = x1(), ly = y1(), hx = x2(), hy = y2();
  if (lx >= 0.0 && ly >= 0.0 && hx <= 1.0 && hy <= 1.0) {
    if (w > 0.0 && h > 0.0) return *this;
    return std::nullopt;
  }
  const double cx1 = std::max(0.0, lx), cy1 = std::max(0.0, ly);
  const double cx2 = std::min(1.0, hx), cy2 = std::min(1.0, hy);
  if (cx2 <= cx1 || cy2 <= cy1) return std::nullopt;
  return from_corners(class_id, cx1, cy1, cx2, cy2);
}

bool is_valid(const BoundingBox& b) {
  auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  return b.class_id >= 0 && in01(b.cx) && in01(b.cy) && in01(b.w) && in01(b.h) && b.w > 0.0 && b.h > 0.0;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::original: return "original";
    case Origin::stylized: return "stylized";
    case Origin::fog_synth: return "fog_synth";
    case Origin::gamma_synth: return "gamma_synth";
  }
  return "original";
}

Origin parse_origin(std::string_view text) {
  if (text == "original") return Origin::original;
  if (text == "stylized") return Origin::stylized;
  if (text == "fog_synth") return Origin::fog_synth;
  if (text == "gamma_synth") return Origin::gamma_synth;
  throw DataError("unknown origin '" + std::string(text) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw DataError("unknown split '" + std::string(text) + "'");
}

const LabeledImage* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& e : entries) {
    if (e.image_id == image_id) return &e;
  }
  return nullptr;
}

void DatasetManifest::validate() const {
  std::unordered_set<std::string> ids;
  ids.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.image_id.empty()) throw DataError(name + ": entry with empty image id");
    if (!ids.insert(e.image_id).second) throw DataError(name + ": duplicate image id '" + e.image_id + "'");
    if (e.origin == Origin::original && e.reference_id != e.image_id) {
      throw DataError(name + ": original '" + e.image_id + "' must reference itself");
    }
    if (e.origin != Origin::original && e.reference_id.empty()) {
      throw DataError(name + ": derived image '" + e.image_id + "' has no reference id");
    }
    for (const auto& b : e.boxes) {
      if (!is_valid(b)) throw DataError(name + ": invalid box in '" + e.image_id + "'");
      if (static_cast<std::size_t>(b.class_id) >= class_names.size()) {
        throw DataError(name + ": class id " + std::to_string(b.class_id) + " out of range in '" + e.image_id + "'");
      }
    }
    if (e.has_pixels()) {
      check_image(e.pixels, e.image_id);
    }
  }
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string location(const fs::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

std::vector<BoundingBox> read_labels(const fs::path& path, std::size_t* dropped, std::vector<std::string>* diagnostics) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open label file: " + path.string());
  std::vector<BoundingBox> boxes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    std::istringstream fields(text);
    BoundingBox box;
    std::string extra;
    if (!(fields >> box.class_id >> box.cx >> box.cy >> box.w >> box.h) || (fields >> extra)) {
      throw DataError(location(path, lineno) + ": malformed label line '" + text + "', expected 'class cx cy w h'");
    }
    if (!is_valid(box)) {
      throw DataError(location(path, lineno) + ": box outside [0,1] or with non-positive extent: '" + text + "'");
    }
    auto clipped = box.clipped();
    if (!clipped) {
      const std::string msg = location(path, lineno) + ": degenerate box after clipping dropped";
      log::warn(msg);
      if (diagnostics) diagnostics->push_back(msg);
      if (dropped) ++*dropped;
      continue;
    }
    boxes.push_back(*clipped);
  }
  return boxes;
}

void write_labels(const fs::path& path, const std::vector<BoundingBox>& boxes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write label file: " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& b : boxes) out << b.class_id << ' ' << b.cx << ' ' << b.cy << ' ' << b.w << ' ' << b.h << '\n';
}

DatasetManifest load_dataset(const fs::path& manifest_path, const LoadOptions& options, LoadReport* report) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest: " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();

  DatasetManifest manifest;
  manifest.name = manifest_path.stem().string();
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    if (text.front() == '@') {
      const auto space = text.find_first_of(" \t");
      const std::string key = text.substr(1, space == std::string::npos ? std::string::npos : space - 1);
      const std::string value = space == std::string::npos ? std::string() : trim(text.substr(space));
      if (key == "name") {
        manifest.name = value;
      } else if (key == "split") {
        manifest.split = parse_split(value);
      } else if (key == "classes") {
        manifest.class_names = value.empty() ? std::vector<std::string>{} : split_on(value, ',');
      } else {
        throw DataError(location(manifest_path, lineno) + ": unknown header '@" + key + "'");
      }
      continue;
    }

    const auto fields = split_on(text, '\t');
    if (fields.empty() || fields[0].empty() || fields.size() > 4) {
      throw DataError(location(manifest_path, lineno) +
                      ": expected 'image<TAB>labels<TAB>origin<TAB>reference_id'");
    }
    LabeledImage entry;
    entry.image_path = resolve(base, fields[0]);
    entry.image_id = entry.image_path.stem().string();
    entry.origin = fields.size() > 2 && !fields[2].empty() ? parse_origin(fields[2]) : Origin::original;
    entry.reference_id = fields.size() > 3 && !fields[3].empty() ? fields[3] : entry.image_id;

    if (!fs::exists(entry.image_path)) {
      throw DataError(location(manifest_path, lineno) + ": image file not found: " + entry.image_path.string());
    }
    if (fields.size() > 1 && !fields[1].empty() && fields[1] != "-") {
      entry.label_path = resolve(base, fields[1]);
      try {
        entry.boxes = read_labels(entry.label_path, &rep.dropped_boxes, &rep.diagnostics);
        for (const auto& b : entry.boxes) {
          if (static_cast<std::size_t>(b.class_id) >= manifest.class_names.size()) {
            throw DataError(entry.label_path.string() + ": class id " + std::to_string(b.class_id) +
                            " has no entry in @classes");
          }
        }
      } catch (const DataError& err) {
        const std::string msg = std::string(err.what()) + " (entry '" + entry.image_id + "' rejected)";
        log::warn(msg);
        rep.diagnostics.push_back(msg);
        ++rep.rejected_entries;
        continue;
      }
    }
    if (options.load_pixels) entry.pixels = load_image(entry.image_path);
    manifest.entries.push_back(std::move(entry));
  }
  manifest.validate();
  return manifest;
}

void save_dataset(const DatasetManifest& manifest, const fs::path& manifest_path) {
  const fs::path base = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
  fs::create_directories(base);
  std::ostringstream body;
  body << "# sdnia manifest v1\n";
  body << "@name " << manifest.name << '\n';
  body << "@split " << to_string(manifest.split) << '\n';
  body << "@classes ";
  for (std::size_t i = 0; i < manifest.class_names.size(); ++i) body << (i ? "," : "") << manifest.class_names[i];
  body << '\n';
  for (const auto& e : manifest.entries) {
    fs::path image = e.image_path;
    if (image.empty() || !fs::exists(image)) {
      if (!e.has_pixels()) throw DataError("entry '" + e.image_id + "' has neither an image file nor pixels");
      image = base / "images" / (e.image_id + ".png");
      save_image(e.pixels, image);
    }
    const fs::path labels = base / "labels" / (e.image_id + ".txt");
    write_labels(labels, e.boxes);
    body << fs::relative(image, base).generic_string() << '\t' << fs::relative(labels, base).generic_string() << '\t'
         << to_string(e.origin) << '\t' << e.reference_id << '\n';
  }
  std::ofstream out(manifest_path);
  if (!out) throw DataError("cannot write manifest: " + manifest_path.string());
  out << body.str();
}

void load_pixels(DatasetManifest& manifest) {
  for (auto& e : manifest.entries) {
    if (!e.has_pixels()) {
      if (e.image_path.empty()) throw DataError("entry '" + e.image_id + "' has no image path");
      e.pixels = load_image(e.image_path);
    }
  }
}

DatasetManifest filter_classes(const DatasetManifest& dataset, const std::vector<std::string>& keep) {
  std::unordered_map<int, int> remap;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto it = std::find(dataset.class_names.begin(), dataset.class_names.end(), keep[k]);
    if (it == dataset.class_names.end()) {
      throw ConfigError("filter_classes: unknown class '" + keep[k] + "' in dataset '" + dataset.name + "'");
    }
    remap[static_cast<int>(it - dataset.class_names.begin())] = static_cast<int>(k);
  }
  DatasetManifest out;
  out.name = dataset.name;
  out.split = dataset.split;
  out.class_names = keep;
  for (const auto& e : dataset.entries) {
    std::vector<BoundingBox> kept;
    for (const auto& b : e.boxes) {
      if (auto it = remap.find(b.class_id); it != remap.end()) {
        BoundingBox nb = b;
        nb.class_id = it->second;
        kept.push_back(nb);
      }
    }
    if (kept.empty()) continue;
    LabeledImage copy = e;
    copy.boxes = std::move(kept);
    out.entries.push_back(std::move(copy));
  }
  return out;
}

DatasetManifest mix_datasets(const DatasetManifest& originals, const DatasetManifest& stylized) {
  if (!stylized.empty() && originals.class_names != stylized.class_names) {
    throw DataError("mix_datasets: class lists of '" + originals.name + "' and '" + stylized.name + "' differ");
  }
  std::unordered_set<std::string> original_ids;
  original_ids.reserve(originals.size());
  for (const auto& e : originals.entries) {
    if (e.origin == Origin::original) original_ids.insert(e.image_id);
  }
  for (const auto& e : stylized.entries) {
    if (!original_ids.count(e.reference_id)) {
      throw DataError("mix_datasets: '" + e.image_id + "' references unknown original '" + e.reference_id + "'");
    }
  }
  DatasetManifest out;
  out.name = stylized.empty() ? originals.name : originals.name + "+" + stylized.name;
  out.split = originals.split;
  out.class_names = originals.class_names;
  out.entries.reserve(originals.size() + stylized.size());
  out.entries.insert(out.entries.end(), originals.entries.begin(), originals.entries.end());
  out.entries.insert(out.entries.end(), stylized.entries.begin(), stylized.entries.end());
  return out;
}

torch::Tensor fog_depth(int64_t height, int64_t width, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto ys = torch::arange(height, opts).add_(0.5).sub_(0.5 * static_cast<double>(height));
  auto xs = torch::arange(width, opts).add_(0.5).sub_(0.5 * static_cast<double>(width));
  auto d = (ys.pow(2).unsqueeze(1) + xs.pow(2).unsqueeze(0)).sqrt();
  const double half_diagonal = 0.5 * std::hypot(static_cast<double>(height), static_cast<double>(width));
  return (d / half_diagonal).clamp(0.0, 1.0).unsqueeze(0).to(dtype);
}

torch::Tensor synthesize_fog(const torch::Tensor& image, double beta, double airlight) {
  check_image(image);
  if (!(beta >= 0.0)) throw ArgumentError("synthesize_fog: beta must be >= 0, got " + std::to_string(beta));
  if (!(airlight >= 0.0 && airlight <= 1.0)) {
    throw ArgumentError("synthesize_fog: airlight must lie in [0,1], got " + std::to_string(airlight));
  }
  if (beta == 0.0) return image.clone();
  const auto d = fog_depth(image.size(1), image.size(2), image.scalar_type());
  torch::Tensor t;
  if (std::isinf(beta)) {
    t = (d > 0).to(image.scalar_type()).neg().add(1.0);
  } else {
    t = torch::exp(-beta * d);
  }
  return (image * t + airlight * (1.0 - t)).clamp(0.0, 1.0);
}

torch::Tensor synthesize_gamma(const torch::Tensor& image, double gamma) {
  check_image(image);
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw ArgumentError("synthesize_gamma: gamma must be > 0, got " + std::to_string(gamma));
  }
  if (gamma == 1.0) return image.clone();
  return image.pow(gamma).clamp(0.0, 1.0);
}

double sample_gamma(std::mt19937_64& rng, const DegradationRanges& ranges) {
  return std::uniform_real_distribution<double>(ranges.gamma_min, ranges.gamma_max)(rng);
}

DatasetManifest degrade_dataset(const DatasetManifest& clean, Origin kind, std::uint64_t seed,
                                const DegradationRanges& ranges) {
  if (kind != Origin::fog_synth && kind != Origin::gamma_synth) {
    throw ArgumentError("degrade_dataset: kind must be fog_synth or gamma_synth");
  }
  std::mt19937_64 rng(seed);
  DatasetManifest out;
  out.name = clean.name + (kind == Origin::fog_synth ? "_fog" : "_dark");
  out.split = clean.split;
  out.class_names = clean.class_names;
  out.entries.reserve(clean.size());
  for (const auto& e : clean.entries) {
    torch::Tensor src = e.has_pixels() ? e.pixels : load_image(e.image_path);
    LabeledImage d;
    d.boxes = e.boxes;
    d.origin = kind;
    d.reference_id = e.reference_id;
    if (kind == Origin::fog_synth) {
      const double beta = std::uniform_real_distribution<double>(ranges.beta_min, ranges.beta_max)(rng);
      const double airlight = std::uniform_real_distribution<double>(ranges.airlight_min, ranges.airlight_max)(rng);
      d.image_id = e.image_id + "__fog";
      d.pixels = synthesize_fog(src, beta, airlight);
    } else {
      d.image_id = e.image_id + "__dark";
      d.pixels = synthesize_gamma(src, sample_gamma(rng, ranges));
    }
    out.entries.push_back(std::move(d));
  }
  return out;
}

std::pair<DatasetManifest, DatasetManifest> split_validation(const DatasetManifest& dataset, double fraction,
                                                             std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ArgumentError("split_validation: fraction must lie in [0,1)");
  // Whole content groups move together so no variant of a training scene is validated on.
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& e = dataset.entries[i];
    groups[e.reference_id.empty() ? e.image_id : e.reference_id].push_back(i);
  }
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [ref, idx] : groups) order.push_back(&idx);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  std::vector<bool> to_val(dataset.size(), false);
  for (std::size_t k = 0; k < n_val && k < order.size(); ++k)
    for (const auto i : *order[k]) to_val[i] = true;
  DatasetManifest train, val;
  train.name = dataset.name + "_train";
  val.name = dataset.name + "_val";
  train.split = Split::train;
  val.split = Split::val;
  train.class_names = val.class_names = dataset.class_names;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    (to_val[i] ? val : train).entries.push_back(dataset.entries[i]);
  }
  return {std::move(train), std::move(val)};
}

}  // namespace sdnia::imagery
