// SPDX-License-Identifier: Apache-2.0
#include "sdnia/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sdnia/errors.hpp"

namespace sdnia::detector {

DetectorConfig DetectorConfig::defaults(int num_classes, std::vector<int> scales) {
  // YOLOv3 pixel anchors over a 416 reference, small to large.
  static const std::vector<std::vector<Anchor>> kYolo = {
      {{10 / 416.0, 13 / 416.0}, {16 / 416.0, 30 / 416.0}, {33 / 416.0, 23 / 416.0}},
      {{30 / 416.0, 61 / 416.0}, {62 / 416.0, 45 / 416.0}, {59 / 416.0, 119 / 416.0}},
      {{116 / 416.0, 90 / 416.0}, {156 / 416.0, 198 / 416.0}, {373 / 416.0, 326 / 416.0}},
  };
  DetectorConfig c;
  c.num_classes = num_classes;
  c.grid_scales = std::move(scales);
  const std::size_t n = c.grid_scales.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t set = std::min<std::size_t>(kYolo.size() - 1, kYolo.size() - n + i);
    c.anchors.push_back(kYolo[set]);
  }
  return c;
}

int DetectorConfig::max_scale() const {
  return grid_scales.empty() ? 1 : *std::max_element(grid_scales.begin(), grid_scales.end());
}

std::size_t DetectorConfig::total_anchors() const {
  std::size_t n = 0;
  for (const auto& a : anchors) n += a.size();
  return n;
}

void DetectorConfig::validate() const {
  if (num_classes < 1) throw ConfigError("detector: num_classes must be >= 1");
  if (grid_scales.empty()) throw ConfigError("detector: at least one grid scale is required");
  for (std::size_t i = 0; i < grid_scales.size(); ++i) {
    const int s = grid_scales[i];
    if (s < 2 || (s & (s - 1)) != 0 || s > 64) throw ConfigError("detector: grid scales must be powers of two in [2, 64]");
    if (i > 0 && s != 2 * grid_scales[i - 1]) {
      throw ConfigError("detector: grid scales must be consecutive powers of two in ascending order");
    }
  }
  if (anchors.size() != grid_scales.size()) throw ConfigError("detector: one anchor list per grid scale is required");
  for (const auto& list : anchors) {
    if (list.empty()) throw ConfigError("detector: empty anchor list");
    for (const auto& a : list) {
      if (!(a.w > 0.0 && a.h > 0.0)) throw ConfigError("detector: anchors must be positive");
    }
  }
  if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) throw ConfigError("detector: conf_threshold must lie in [0,1]");
  if (!(nms_iou_threshold >= 0.0 && nms_iou_threshold <= 1.0)) {
    throw ConfigError("detector: nms_iou_threshold must lie in [0,1]");
  }
  if (width < 1) throw ConfigError("detector: width must be >= 1");
}

nlohmann::json DetectorConfig::to_json() const {
  nlohmann::json anchors_json = nlohmann::json::array();
  for (const auto& list : anchors) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& a : list) l.push_back({a.w, a.h});
    anchors_json.push_back(l);
  }
  return {{"num_classes", num_classes},     {"grid_scales", grid_scales},
          {"anchors", anchors_json},        {"conf_threshold", conf_threshold},
          {"nms_iou_threshold", nms_iou_threshold}, {"width", width}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  const int classes = j.at("num_classes").get<int>();
  DetectorConfig c = defaults(classes, j.value("grid_scales", std::vector<int>{16, 32}));
  if (j.contains("anchors")) {
    c.anchors.clear();
    for (const auto& list : j.at("anchors")) {
      std::vector<Anchor> l;
      for (const auto& a : list) l.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
      c.anchors.push_back(std::move(l));
    }
  }
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.nms_iou_threshold = j.value("nms_iou_threshold", c.nms_iou_threshold);
  c.width = j.value("width", c.width);
  return c;
}

namespace {

int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// Conv (no bias) + GroupNorm + leaky ReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out, int64_t k, int64_t stride) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k)
                                                         .stride(stride)
                                                         .padding(k / 2)
                                                         .bias(false)));
    norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out), out)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return torch::leaky_relu(norm(conv(x)), 0.1); }

  torch::nn::Conv2d conv{nullptr};
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvBlock);

class ResidualImpl : public torch::nn::Module {
 public:
  explicit ResidualImpl(int64_t channels) {
    reduce = register_module("reduce", ConvBlock(channels, std::max<int64_t>(1, channels / 2), 1, 1));
    expand = register_module("expand", ConvBlock(std::max<int64_t>(1, channels / 2), channels, 3, 1));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + expand(reduce(x)); }

  ConvBlock reduce{nullptr};
  ConvBlock expand{nullptr};
};
TORCH_MODULE(Residual);

int log2_int(int v) {
  int r = 0;
  while ((1 << r) < v) ++r;
  return r;
}

}  // namespace

TinyYoloImpl::TinyYoloImpl(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  const int64_t w = config_.width;
  const int n_stages = log2_int(config_.max_scale());
  stem = register_module("stem", torch::nn::Sequential(ConvBlock(3, w, 3, 1)));
  for (int k = 0; k < n_stages; ++k) {
    const int64_t in = w << k, out = w << (k + 1);
    stages_.push_back(register_module("stage" + std::to_string(k),
                                      torch::nn::Sequential(ConvBlock(in, out, 3, 2), Residual(out))));
  }

  const std::size_t n_scales = config_.grid_scales.size();
  int64_t in_channels = w * config_.max_scale();
  int64_t mid = in_channels / 2;
  for (std::size_t i = 0; i < n_scales; ++i) {
    const std::size_t scale_index = n_scales - 1 - i;  // deepest first
    const int64_t n_out = static_cast<int64_t>(config_.anchors[scale_index].size()) * (5 + config_.num_classes);
    necks_.push_back(register_module("neck" + std::to_string(i),
                                     torch::nn::Sequential(ConvBlock(in_channels, mid, 1, 1), ConvBlock(mid, mid, 3, 1))));
    auto out = torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, n_out, 1).bias(true));
    outputs_.push_back(register_module("out" + std::to_string(i), out));
    {
      // Objectness prior of 0.01 keeps the background term small at the start.
      torch::NoGradGuard no_grad;
      const int64_t per_anchor = 5 + config_.num_classes;
      for (int64_t a = 0; a < n_out / per_anchor; ++a) out->bias[a * per_anchor + 4].fill_(-4.595);
    }
    if (i + 1 < n_scales) {
      const int64_t lateral = std::max<int64_t>(1, mid / 2);
      laterals_.push_back(register_module("lateral" + std::to_string(i),
                                          torch::nn::Sequential(ConvBlock(mid, lateral, 1, 1))));
      const int64_t skip_channels = w * config_.grid_scales[scale_index - 1];
      in_channels = lateral + skip_channels;
      mid = std::max<int64_t>(1, mid / 2);
    }
  }
}

std::vector<torch::Tensor> TinyYoloImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    std::ostringstream os;
    os << "detect_forward: expected [B,3,H,W] input, got " << images.sizes();
    throw ArgumentError(os.str());
  }
  const int m = config_.max_scale();
  if (images.size(2) % m != 0 || images.size(3) % m != 0) {
    std::ostringstream os;
    os << "detect_forward: image size " << images.size(2) << "x" << images.size(3) << " must be a multiple of " << m;
    throw ArgumentError(os.str());
  }
  std::vector<torch::Tensor> features;  // index k: stride 2^(k+1)
  auto x = stem->forward(images);
  for (auto& stage : stages_) {
    x = stage->forward(x);
    features.push_back(x);
  }

  const std::size_t n_scales = config_.grid_scales.size();
  std::vector<torch::Tensor> raw(n_scales);
  torch::Tensor route = features.back();
  for (std::size_t i = 0; i < n_scales; ++i) {
    const std::size_t scale_index = n_scales - 1 - i;
    const auto n = necks_[i]->forward(route);
    const auto o = outputs_[i]->forward(n);
    const int64_t anchors = static_cast<int64_t>(config_.anchors[scale_index].size());
    raw[scale_index] = o.view({o.size(0), anchors, 5 + config_.num_classes, o.size(2), o.size(3)})
                           .permute({0, 3, 4, 1, 2})
                           .contiguous();
    if (i + 1 < n_scales) {
      auto up = laterals_[i]->forward(n);
      up = torch::upsample_nearest2d(up, {up.size(2) * 2, up.size(3) * 2});
      const int stage = log2_int(config_.grid_scales[scale_index - 1]) - 1;
      route = torch::cat({up, features[static_cast<std::size_t>(stage)]}, 1);
    }
  }
  return raw;
}

std::vector<GridInfo> grid_layout(const DetectorConfig& config, int64_t height, int64_t width) {
  std::vector<GridInfo> out;
  for (std::size_t i = 0; i < config.grid_scales.size(); ++i) {
    const int s = config.grid_scales[i];
    out.push_back(GridInfo{s, height / s, width / s, config.anchors[i]});
  }
  return out;
}

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

std::vector<std::vector<Detection>> decode_predictions(const std::vector<torch::Tensor>& raw,
                                                       const DetectorConfig& config) {
  return decode_predictions(raw, config, config.conf_threshold);
}

std::vector<std::vector<Detection>> decode_predictions(const std::vector<torch::Tensor>& raw,
                                                       const DetectorConfig& config, double conf_threshold) {
  if (raw.size() != config.grid_scales.size()) throw ArgumentError("decode_predictions: one tensor per scale expected");
  const int64_t batch = raw.empty() ? 0 : raw.front().size(0);
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
  for (std::size_t s = 0; s < raw.size(); ++s) {
    const auto p = raw[s].detach().to(torch::kCPU, torch::kFloat64).contiguous();
    if (p.dim() != 5 || p.size(3) != static_cast<int64_t>(config.anchors[s].size()) ||
        p.size(4) != 5 + config.num_classes) {
      throw ArgumentError("decode_predictions: raw tensor does not match the detector config");
    }
    const auto acc = p.accessor<double, 5>();
    const int64_t rows = p.size(1), cols = p.size(2), na = p.size(3);
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
          for (int64_t a = 0; a < na; ++a) {
            const double obj = sigmoid(acc[b][i][j][a][4]);
            int best = 0;
            double best_score = -1.0;
            for (int c = 0; c < config.num_classes; ++c) {
              const double sc = sigmoid(acc[b][i][j][a][5 + c]);
              if (sc > best_score) {
                best_score = sc;
                best = c;
              }
            }
            const double conf = obj * best_score;
            if (!(conf >= conf_threshold)) continue;
            const auto& anchor = config.anchors[s][static_cast<std::size_t>(a)];
            BoundingBox box;
            box.class_id = best;
            box.cx = (static_cast<double>(j) + sigmoid(acc[b][i][j][a][0])) / static_cast<double>(cols);
            box.cy = (static_cast<double>(i) + sigmoid(acc[b][i][j][a][1])) / static_cast<double>(rows);
            box.w = anchor.w * std::exp(acc[b][i][j][a][2]);
            box.h = anchor.h * std::exp(acc[b][i][j][a][3]);
            const auto clipped = box.clipped();
            if (!clipped) continue;
            out[static_cast<std::size_t>(b)].push_back(Detection{*clipped, conf, best, best_score});
          }
        }
      }
    }
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && imagery::box_iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

EncodedBox encode_box(const BoundingBox& box, const GridInfo& grid, const Anchor& anchor) {
  EncodedBox code;
  const double gx = box.cx * static_cast<double>(grid.cols);
  const double gy = box.cy * static_cast<double>(grid.rows);
  code.col = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gx)), 0, grid.cols - 1);
  code.row = std::clamp<int64_t>(static_cast<int64_t>(std::floor(gy)), 0, grid.rows - 1);
  const double fx = gx - static_cast<double>(code.col);
  const double fy = gy - static_cast<double>(code.row);
  code.tx = std::log(fx) - std::log1p(-fx);
  code.ty = std::log(fy) - std::log1p(-fy);
  code.tw = std::log(box.w / anchor.w);
  code.th = std::log(box.h / anchor.h);
  return code;
}

BoundingBox decode_box(const EncodedBox& code, const GridInfo& grid, const Anchor& anchor, int class_id) {
  BoundingBox box;
  box.class_id = class_id;
  box.cx = (static_cast<double>(code.col) + sigmoid(code.tx)) / static_cast<double>(grid.cols);
  box.cy = (static_cast<double>(code.row) + sigmoid(code.ty)) / static_cast<double>(grid.rows);
  box.w = anchor.w * std::exp(code.tw);
  box.h = anchor.h * std::exp(code.th);
  return box;
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

std::vector<ScaleTargets> build_targets(const std::vector<std::vector<BoundingBox>>& boxes,
                                        const DetectorConfig& config, int64_t height, int64_t width,
                                        torch::Dtype dtype) {
  const auto grids = grid_layout(config, height, width);
  const auto batch = static_cast<int64_t>(boxes.size());
  const int64_t n_cls = config.num_classes;

  std::vector<torch::Tensor> pos, bx, cls;
  for (const auto& g : grids) {
    const auto na = static_cast<int64_t>(g.anchors.size());
    pos.push_back(torch::zeros({batch, g.rows, g.cols, na}, torch::kBool));
    bx.push_back(torch::zeros({batch, g.rows, g.cols, na, 4}, torch::kFloat64));
    cls.push_back(torch::zeros({batch, g.rows, g.cols, na, n_cls}, torch::kFloat64));
  }

  for (int64_t b = 0; b < batch; ++b) {
    for (const auto& box : boxes[static_cast<std::size_t>(b)]) {
      if (box.class_id < 0 || box.class_id >= n_cls) {
        throw ArgumentError("build_targets: class id " + std::to_string(box.class_id) + " out of range");
      }
      std::size_t best_scale = 0, best_anchor = 0;
      double best = -1.0;
      for (std::size_t s = 0; s < grids.size(); ++s) {
        for (std::size_t a = 0; a < grids[s].anchors.size(); ++a) {
          const double v = shape_iou(box.w, box.h, grids[s].anchors[a].w, grids[s].anchors[a].h);
          if (v > best) {
            best = v;
            best_scale = s;
            best_anchor = a;
          }
        }
      }
      const auto& g = grids[best_scale];
      const auto code = encode_box(box, g, g.anchors[best_anchor]);
      const auto a = static_cast<int64_t>(best_anchor);
      pos[best_scale][b][code.row][code.col][a] = true;
      bx[best_scale][b][code.row][code.col][a] = torch::tensor({box.cx, box.cy, box.w, box.h}, torch::kFloat64);
      auto onehot = cls[best_scale][b][code.row][code.col][a];
      onehot.zero_();
      onehot[box.class_id] = 1.0;
    }
  }

  std::vector<ScaleTargets> out;
  for (std::size_t s = 0; s < grids.size(); ++s) {
    out.push_back(ScaleTargets{pos[s], bx[s].to(dtype), cls[s].to(dtype)});
  }
  return out;
}

}  // namespace sdnia::detector
