// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdnia/detector.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/model.hpp"

namespace sdnia::evaluation {

using detector::Detection;
using imagery::BoundingBox;

/// Axis-aligned IoU. Throws ArgumentError on boxes with non-positive or non-finite extent.
double iou(const BoundingBox& a, const BoundingBox& b);

enum class ApMethod {
  coco101,     // mean of the interpolated precision at recall 0, 0.01, ..., 1
  continuous,  // area under the interpolated precision envelope at every recall step
};

/// Detections and ground truth of one image.
struct ImageResult {
  std::string image_id;
  std::vector<Detection> detections;
  std::vector<BoundingBox> ground_truth;
};

/// AP of one class over a set of images. Detections are ranked by confidence; equal confidences
/// keep input order (image order, then list order). Each detection claims the unmatched ground
/// truth of its image with the highest IoU, if that IoU >= threshold. NaN when the class has no
/// ground truth.
double class_average_precision(const std::vector<ImageResult>& images, int class_id, double iou_threshold,
                               ApMethod method = ApMethod::coco101);

/// Single-list AP; class ids are ignored.
double average_precision(const std::vector<Detection>& detections, const std::vector<BoundingBox>& ground_truth,
                         double iou_threshold, ApMethod method = ApMethod::coco101);

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

struct LatencySummary {
  int64_t input_size = 0;
  int runs = 0;
  double mean_ms = 0.0;
  double p95_ms = 0.0;  // nearest rank
  nlohmann::json to_json() const;
};

struct LatencyReport {
  int64_t input_size = 0;
  LatencySummary sdnia;
  LatencySummary detector_only;
  double nia_overhead_ms = 0.0;  // sdnia.mean_ms - detector_only.mean_ms
  nlohmann::json to_json() const;
};

struct EvalReport {
  std::string test_set;
  std::vector<std::string> class_names;
  std::vector<double> thresholds;
  std::vector<std::vector<double>> per_class_ap;  // [class][threshold], NaN for absent classes
  double map_50 = 0.0;
  double map_50_95 = 0.0;
  std::size_t images = 0;
  std::size_t ground_truths = 0;
  std::size_t detections = 0;
  std::vector<LatencyReport> latency;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Per-class AP over `thresholds`. map_50 averages AP at IoU 0.5 over classes with ground truth;
/// map_50_95 averages over those classes and every threshold. Throws ArgumentError on an empty set.
EvalReport map_range(const std::vector<ImageResult>& images, const std::vector<std::string>& class_names,
                     const std::vector<double>& thresholds = coco_thresholds(), ApMethod method = ApMethod::coco101);

/// Runs the model over every entry, resized to image_size, in batches.
std::vector<ImageResult> detect_dataset(SdniaModel& model, const imagery::DatasetManifest& dataset,
                                        int64_t image_size, double conf_threshold, int batch_size = 8);

/// Convenience: detect_dataset + map_range.
EvalReport evaluate_model(SdniaModel& model, const imagery::DatasetManifest& dataset, int64_t image_size,
                          double conf_threshold, const std::vector<double>& thresholds = coco_thresholds());

/// Pairs externally produced detections with the dataset's ground truth by image id. Images missing
/// from `detections` count as having none; unknown ids throw DataError.
std::vector<ImageResult> pair_detections(const imagery::DatasetManifest& dataset,
                                         const std::vector<ImageResult>& detections);

/// One line per image: {"image_id", "detections": [{class_id, cx, cy, w, h, confidence, class_score}]}.
void write_detections(const std::filesystem::path& path, const std::vector<ImageResult>& results);
std::vector<ImageResult> read_detections(const std::filesystem::path& path);

/// Wall-clock milliseconds per call, warmups excluded.
LatencySummary measure_latency(const std::function<void()>& run, int warmup, int runs);

/// Times the full model and the detector alone on a batch of one input_size^2 image. Without an
/// NIA in the model, a freshly initialized one is timed for the overhead figure.
LatencyReport measure_model_latency(SdniaModel& model, int64_t input_size, int warmup = 3, int runs = 10);

/// Rows x columns grid of mAP@.5 / mAP@.5:.95 cells.
std::string render_table(const std::vector<std::string>& rows, const std::vector<std::string>& columns,
                         const std::function<std::optional<std::pair<double, double>>(std::size_t, std::size_t)>& cell);

}  // namespace sdnia::evaluation
