// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "sdnia/imagery.hpp"

namespace sdnia::detector {

using imagery::BoundingBox;

/// Anchor extent, normalized to the image size.
struct Anchor {
  double w = 0.0;
  double h = 0.0;
  bool operator==(const Anchor&) const = default;
};

struct DetectorConfig {
  int num_classes = 1;
  std::vector<int> grid_scales{16, 32};           // downsampling factors, ascending
  std::vector<std::vector<Anchor>> anchors;       // one anchor list per scale
  double conf_threshold = 0.25;
  double nms_iou_threshold = 0.45;
  int width = 16;                                 // backbone base channel count

  /// YOLOv3 anchors rescaled to a 416 reference; mid and large sets for scales (16, 32),
  /// all three sets for (8, 16, 32).
  static DetectorConfig defaults(int num_classes, std::vector<int> scales = {16, 32});

  int max_scale() const;
  std::size_t total_anchors() const;

  /// Throws ConfigError.
  void validate() const;

  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
  bool operator==(const DetectorConfig&) const = default;
};

/// `box` is in normalized center form, clipped to the unit square; box.class_id == class_id.
/// confidence = objectness * class_score.
struct Detection {
  BoundingBox box;
  double confidence = 0.0;
  int class_id = 0;
  double class_score = 0.0;
};

/// Reduced darknet-style body with residual stages and a YOLOv3 head per scale.
/// forward() returns one raw tensor per scale, shaped [B, H/s, W/s, A, 5 + C] with the last axis
/// laid out as (tx, ty, tw, th, objectness, class logits...).
class TinyYoloImpl : public torch::nn::Module {
 public:
  explicit TinyYoloImpl(DetectorConfig config);

  std::vector<torch::Tensor> forward(const torch::Tensor& images);

  const DetectorConfig& config() const { return config_; }

 private:
  DetectorConfig config_;
  torch::nn::Sequential stem{nullptr};
  std::vector<torch::nn::Sequential> stages_;   // stage k reaches stride 2^(k+1)
  std::vector<torch::nn::Sequential> necks_;    // per scale, deepest first
  std::vector<torch::nn::Conv2d> outputs_;      // per scale, deepest first
  std::vector<torch::nn::Sequential> laterals_; // channel reduction before upsampling
};
TORCH_MODULE(TinyYolo);

/// Grid geometry of one raw output.
struct GridInfo {
  int scale = 32;
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<Anchor> anchors;
};

std::vector<GridInfo> grid_layout(const DetectorConfig& config, int64_t height, int64_t width);

/// Sigmoid offsets within the cell, exponential anchor scaling, boxes in normalized image
/// coordinates, filtered by conf_threshold (inclusive). Returns one list per batch image.
std::vector<std::vector<Detection>> decode_predictions(const std::vector<torch::Tensor>& raw,
                                                       const DetectorConfig& config);
std::vector<std::vector<Detection>> decode_predictions(const std::vector<torch::Tensor>& raw,
                                                       const DetectorConfig& config, double conf_threshold);

/// Per-class greedy suppression of boxes whose IoU with a kept box exceeds the threshold.
/// Output sorted by confidence, descending.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

/// Grid-space encoding of a single box for a given cell size and anchor.
struct EncodedBox {
  int64_t row = 0;
  int64_t col = 0;
  double tx = 0.0;  // logit of the in-cell offset
  double ty = 0.0;
  double tw = 0.0;  // log of the size ratio to the anchor
  double th = 0.0;
};

EncodedBox encode_box(const BoundingBox& box, const GridInfo& grid, const Anchor& anchor);
BoundingBox decode_box(const EncodedBox& code, const GridInfo& grid, const Anchor& anchor, int class_id = 0);

/// IoU of two extents sharing a center; used for anchor assignment.
double shape_iou(double w1, double h1, double w2, double h2);

/// Ground-truth grids for one scale.
struct ScaleTargets {
  torch::Tensor positive;  // [B, rows, cols, A] bool
  torch::Tensor boxes;     // [B, rows, cols, A, 4] normalized (cx, cy, w, h)
  torch::Tensor classes;   // [B, rows, cols, A, C] one-hot
};

/// Each box goes to its best-IoU anchor across all scales, in the cell containing its center.
std::vector<ScaleTargets> build_targets(const std::vector<std::vector<BoundingBox>>& boxes,
                                        const DetectorConfig& config, int64_t height, int64_t width,
                                        torch::Dtype dtype = torch::kFloat32);

}  // namespace sdnia::detector
