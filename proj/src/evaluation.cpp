// SPDX-License-Identifier: Apache-2.0
#include "sdnia/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "sdnia/errors.hpp"
#include "sdnia/image.hpp"

namespace sdnia::evaluation {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_box(const BoundingBox& b) {
  if (!(std::isfinite(b.cx) && std::isfinite(b.cy) && b.w > 0.0 && b.h > 0.0 && std::isfinite(b.w) &&
        std::isfinite(b.h))) {
    throw ArgumentError("iou: degenerate box");
  }
}

struct Ranked {
  std::size_t image = 0;
  const Detection* det = nullptr;
};

double integrate(const std::vector<double>& precision, const std::vector<double>& recall, ApMethod method) {
  const std::size_t n = precision.size();
  std::vector<double> envelope(precision);
  for (std::size_t i = n; i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  if (method == ApMethod::coco101) {
    double sum = 0.0;
    std::size_t k = 0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      while (k < n && recall[k] < level) ++k;
      if (k < n) sum += envelope[k];
    }
    return sum / 101.0;
  }
  double ap = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev) * envelope[i];
    prev = recall[i];
  }
  return ap;
}

double mean_finite(const std::vector<double>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : values) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  return n == 0 ? kNaN : sum / static_cast<double>(n);
}

std::string fmt(double v, int digits = 4) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  require_box(a);
  require_box(b);
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double class_average_precision(const std::vector<ImageResult>& images, int class_id, double iou_threshold,
                               ApMethod method) {
  std::size_t total_gt = 0;
  std::vector<std::vector<const BoundingBox*>> gts(images.size());
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& g : images[i].ground_truth) {
      if (g.class_id == class_id) gts[i].push_back(&g);
    }
    total_gt += gts[i].size();
    for (const auto& d : images[i].detections) {
      if (d.class_id == class_id) ranked.push_back({i, &d});
    }
  }
  if (total_gt == 0) return kNaN;
  if (ranked.empty()) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.det->confidence > b.det->confidence; });

  std::vector<std::vector<bool>> taken(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) taken[i].assign(gts[i].size(), false);
  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts[r.image].size(); ++j) {
      if (taken[r.image][j]) continue;
      const double v = iou(r.det->box, *gts[r.image][j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      taken[r.image][best_j] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  return integrate(precision, recall, method);
}

double average_precision(const std::vector<Detection>& detections, const std::vector<BoundingBox>& ground_truth,
                         double iou_threshold, ApMethod method) {
  ImageResult single;
  single.detections = detections;
  for (auto& d : single.detections) d.class_id = 0;
  single.ground_truth = ground_truth;
  for (auto& g : single.ground_truth) g.class_id = 0;
  return class_average_precision({single}, 0, iou_threshold, method);
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

nlohmann::json LatencySummary::to_json() const {
  return {{"input_size", input_size}, {"runs", runs}, {"mean_ms", mean_ms}, {"p95_ms", p95_ms}};
}

nlohmann::json LatencyReport::to_json() const {
  return {{"input_size", input_size},
          {"sdnia", sdnia.to_json()},
          {"detector_only", detector_only.to_json()},
          {"nia_overhead_ms", nia_overhead_ms}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t t = 0; t < thresholds.size(); ++t) row[fmt(thresholds[t], 2)] = number_or_null(per_class_ap[c][t]);
    per_class[class_names[c]] = row;
  }
  nlohmann::json j = {{"test_set", test_set},
                      {"map_50", number_or_null(map_50)},
                      {"map_50_95", number_or_null(map_50_95)},
                      {"thresholds", thresholds},
                      {"per_class_ap", per_class},
                      {"counts", {{"images", images}, {"ground_truths", ground_truths}, {"detections", detections}}}};
  if (!latency.empty()) {
    j["latency"] = nlohmann::json::array();
    for (const auto& l : latency) j["latency"].push_back(l.to_json());
  }
  return j;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "test set: " << (test_set.empty() ? "-" : test_set) << "  images " << images << "  gts " << ground_truths
     << "  dets " << detections << "\n";
  std::size_t width = 8;
  for (const auto& n : class_names) width = std::max(width, n.size() + 2);
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s %10s %10s\n", static_cast<int>(width), "class", "AP@.5", "AP@.5:.95");
  os << line;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    double at50 = kNaN;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      if (thresholds[t] == 0.5) at50 = per_class_ap[c][t];
    }
    std::snprintf(line, sizeof(line), "%-*s %10s %10s\n", static_cast<int>(width), class_names[c].c_str(),
                  fmt(at50).c_str(), fmt(mean_finite(per_class_ap[c])).c_str());
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-*s %10s %10s\n", static_cast<int>(width), "mAP", fmt(map_50).c_str(),
                fmt(map_50_95).c_str());
  os << line;
  for (const auto& l : latency) {
    std::snprintf(line, sizeof(line),
                  "latency %lldx%lld: sdnia %.2f ms (p95 %.2f), detector %.2f ms (p95 %.2f), nia overhead %.2f ms\n",
                  static_cast<long long>(l.input_size), static_cast<long long>(l.input_size), l.sdnia.mean_ms,
                  l.sdnia.p95_ms, l.detector_only.mean_ms, l.detector_only.p95_ms, l.nia_overhead_ms);
    os << line;
  }
  return os.str();
}

EvalReport map_range(const std::vector<ImageResult>& images, const std::vector<std::string>& class_names,
                     const std::vector<double>& thresholds, ApMethod method) {
  if (images.empty()) throw ArgumentError("map_range: empty test set");
  if (thresholds.empty()) throw ArgumentError("map_range: no IoU thresholds");
  const int n_classes = static_cast<int>(class_names.size());
  EvalReport r;
  r.class_names = class_names;
  r.thresholds = thresholds;
  r.images = images.size();
  for (const auto& im : images) {
    for (const auto& g : im.ground_truth) {
      if (g.class_id < 0 || g.class_id >= n_classes) throw ArgumentError("map_range: ground-truth class out of range");
    }
    for (const auto& d : im.detections) {
      if (d.class_id < 0 || d.class_id >= n_classes) throw ArgumentError("map_range: detection class out of range");
    }
    r.ground_truths += im.ground_truth.size();
    r.detections += im.detections.size();
  }
  r.per_class_ap.assign(class_names.size(), std::vector<double>(thresholds.size(), kNaN));
  std::vector<double> at50(class_names.size(), kNaN);
  std::vector<double> class_means(class_names.size(), kNaN);
  for (int c = 0; c < n_classes; ++c) {
    bool has50 = false;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      r.per_class_ap[c][t] = class_average_precision(images, c, thresholds[t], method);
      if (thresholds[t] == 0.5) {
        at50[c] = r.per_class_ap[c][t];
        has50 = true;
      }
    }
    if (!has50) at50[c] = class_average_precision(images, c, 0.5, method);
    class_means[c] = mean_finite(r.per_class_ap[c]);
  }
  r.map_50 = mean_finite(at50);
  r.map_50_95 = mean_finite(class_means);
  return r;
}

std::vector<ImageResult> detect_dataset(SdniaModel& model, const imagery::DatasetManifest& dataset,
                                        int64_t image_size, double conf_threshold, int batch_size) {
  std::vector<ImageResult> out;
  out.reserve(dataset.entries.size());
  const auto dtype = model->parameters().front().scalar_type();
  for (std::size_t start = 0; start < dataset.entries.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(dataset.entries.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> pixels;
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = dataset.entries[i];
      auto p = e.pixels.defined() ? e.pixels : load_image(e.image_path);
      pixels.push_back(resize_square(p, image_size).to(dtype));
    }
    const auto dets = model->detect(torch::stack(pixels), conf_threshold);
    for (std::size_t i = start; i < end; ++i) {
      out.push_back({dataset.entries[i].image_id, dets[i - start], dataset.entries[i].boxes});
    }
  }
  return out;
}

EvalReport evaluate_model(SdniaModel& model, const imagery::DatasetManifest& dataset, int64_t image_size,
                          double conf_threshold, const std::vector<double>& thresholds) {
  auto report = map_range(detect_dataset(model, dataset, image_size, conf_threshold), dataset.class_names, thresholds);
  report.test_set = dataset.name;
  return report;
}

std::vector<ImageResult> pair_detections(const imagery::DatasetManifest& dataset,
                                         const std::vector<ImageResult>& detections) {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<ImageResult> out;
  for (const auto& e : dataset.entries) {
    index.emplace(e.image_id, out.size());
    out.push_back({e.image_id, {}, e.boxes});
  }
  for (const auto& d : detections) {
    const auto it = index.find(d.image_id);
    if (it == index.end()) throw DataError("detections reference unknown image '" + d.image_id + "'");
    auto& dst = out[it->second].detections;
    dst.insert(dst.end(), d.detections.begin(), d.detections.end());
  }
  return out;
}

void write_detections(const std::filesystem::path& path, const std::vector<ImageResult>& results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : results) {
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : r.detections) {
      dets.push_back({{"class_id", d.class_id},
                      {"cx", d.box.cx},
                      {"cy", d.box.cy},
                      {"w", d.box.w},
                      {"h", d.box.h},
                      {"confidence", d.confidence},
                      {"class_score", d.class_score}});
    }
    out << nlohmann::json{{"image_id", r.image_id}, {"detections", dets}}.dump() << "\n";
  }
}

std::vector<ImageResult> read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<ImageResult> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImageResult r;
      r.image_id = j.at("image_id").get<std::string>();
      for (const auto& d : j.value("detections", nlohmann::json::array())) {
        Detection det;
        det.class_id = d.at("class_id").get<int>();
        det.box.class_id = det.class_id;
        det.box.cx = d.at("cx").get<double>();
        det.box.cy = d.at("cy").get<double>();
        det.box.w = d.at("w").get<double>();
        det.box.h = d.at("h").get<double>();
        det.confidence = d.at("confidence").get<double>();
        det.class_score = d.value("class_score", det.confidence);
        r.detections.push_back(det);
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

LatencySummary measure_latency(const std::function<void()>& run, int warmup, int runs) {
  if (runs < 1) throw ArgumentError("measure_latency: runs must be >= 1");
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  LatencySummary s;
  s.runs = runs;
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(runs);
  std::sort(ms.begin(), ms.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(runs)));
  s.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
  if (runs == 1) s.p95_ms = s.mean_ms;
  return s;
}

LatencyReport measure_model_latency(SdniaModel& model, int64_t input_size, int warmup, int runs) {
  model->eval();
  torch::NoGradGuard no_grad;
  const auto dtype = model->parameters().front().scalar_type();
  const auto input = torch::rand({1, 3, input_size, input_size}, torch::TensorOptions().dtype(dtype));
  nia::NIANetwork nia = model->use_nia() ? model->nia() : nia::NIANetwork();
  nia->eval();
  nia->to(dtype);
  auto& det = model->detector();
  LatencyReport r;
  r.input_size = input_size;
  r.sdnia = measure_latency([&] { det->forward(nia->forward(input)); }, warmup, runs);
  r.detector_only = measure_latency([&] { det->forward(input); }, warmup, runs);
  r.sdnia.input_size = r.detector_only.input_size = input_size;
  r.nia_overhead_ms = r.sdnia.mean_ms - r.detector_only.mean_ms;
  return r;
}

std::string render_table(const std::vector<std::string>& rows, const std::vector<std::string>& columns,
                         const std::function<std::optional<std::pair<double, double>>(std::size_t, std::size_t)>& cell) {
  std::size_t label = 8;
  for (const auto& r : rows) label = std::max(label, r.size() + 2);
  std::size_t col = 17;
  for (const auto& c : columns) col = std::max(col, c.size() + 2);
  std::ostringstream os;
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 1, ' '); };
  os << pad("variant", label);
  for (const auto& c : columns) os << pad(c, col);
  os << "\n" << pad("", label);
  for (std::size_t i = 0; i < columns.size(); ++i) os << pad("mAP@.5 / @.5:.95", col);
  os << "\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << pad(rows[r], label);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto v = cell(r, c);
      os << pad(v ? fmt(v->first) + " / " + fmt(v->second) : std::string("failed"), col);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace sdnia::evaluation
