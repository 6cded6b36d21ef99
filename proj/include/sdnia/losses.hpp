// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "sdnia/detector.hpp"

namespace sdnia::losses {

/// Restoration weights (alpha_res, beta_res, gamma_res) and task weights (p1..p4).
struct LossWeights {
  double alpha_res = 0.25;
  double beta_res = 0.25;
  double gamma_res = 0.5;
  double p1 = 0.05;  // box
  double p2 = 1.0;   // objectness
  double p3 = 0.5;   // classification
  double p4 = 0.01;  // restoration

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double l_box = 0.0;
  double l_obj = 0.0;
  double l_cls = 0.0;
  double l_l1 = 0.0;
  double l_msssim = 0.0;  // 1 - MS-SSIM
  double l_vgg_content = 0.0;
  double l_vgg_style = 0.0;
  double l_res = 0.0;
  double l_det = 0.0;
  double l_total = 0.0;

  nlohmann::json to_json() const;
};

// Weighted sums, generic over double and torch::Tensor.

template <typename T>
T restoration_sum(const LossWeights& w, const T& l1, const T& msssim_loss, const T& content, const T& style) {
  return w.alpha_res * l1 + w.beta_res * msssim_loss + w.gamma_res * (content + style);
}

template <typename T>
T detection_sum(const LossWeights& w, const T& box, const T& obj, const T& cls) {
  return w.p1 * box + w.p2 * obj + w.p3 * cls;
}

template <typename T>
T total_sum(const LossWeights& w, const T& box, const T& obj, const T& cls, const T& res) {
  return w.p1 * box + w.p2 * obj + w.p3 * cls + w.p4 * res;
}

/// Recomputes l_res, l_det and l_total from the components.
void finalize(LossBreakdown& b, const LossWeights& w);

/// Total from detection components of `det` and l_res of `res`.
double total_loss(const LossBreakdown& det, const LossBreakdown& res, const LossWeights& w);

/// Mean absolute difference over every element.
torch::Tensor l1_loss(const torch::Tensor& a, const torch::Tensor& b);

struct MsSsimOptions {
  int levels = 5;
  int window = 11;
  double sigma = 1.5;
  double data_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
  bool auto_reduce = true;  // drop coarse levels that do not fit and renormalize the weights
};

/// Standard per-scale exponents for five levels.
const std::vector<double>& ms_ssim_weights();

/// Deepest level count L <= max_levels with min_side >= 2^(L-1) * window; 0 if none fits.
int ms_ssim_levels_for(int64_t min_side, int window, int max_levels = 5);

/// Multi-scale SSIM on the luminance of [3,H,W] or [B,3,H,W] inputs; batch mean. Differentiable.
torch::Tensor ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimOptions& options = {});

/// G = F F^T / (C H W) for [C,H,W] or [B,C,H,W] features.
torch::Tensor gram_matrix(const torch::Tensor& features);

/// Feature taps for the perceptual loss.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  /// [B,3,H,W] -> named [B,C,h,w] maps, containing at least the content and style layers.
  virtual std::map<std::string, torch::Tensor> extract(const torch::Tensor& images) = 0;
  virtual std::vector<std::string> content_layers() const = 0;
  virtual std::vector<std::string> style_layers() const = 0;
};

/// Features are the pixels themselves; one layer, "pixels", used for content and style.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::string name() const override { return "identity"; }
  std::map<std::string, torch::Tensor> extract(const torch::Tensor& images) override;
  std::vector<std::string> content_layers() const override { return {"pixels"}; }
  std::vector<std::string> style_layers() const override { return {"pixels"}; }
};

/// VGG16 convolution stack through block 4 on ImageNet-normalized input. Content at relu3_3,
/// style at relu1_2, relu2_2, relu3_3, relu4_3. Weights are frozen.
class Vgg16Extractor final : public FeatureExtractor {
 public:
  /// Loads weights from a checkpoint file with tensors "vgg/<layer>.weight|bias".
  explicit Vgg16Extractor(const std::filesystem::path& weights);
  /// Seeded random weights; a cheap stand-in for tests.
  static std::unique_ptr<Vgg16Extractor> random(uint64_t seed);
  ~Vgg16Extractor() override;

  std::string name() const override { return "vgg16"; }
  std::map<std::string, torch::Tensor> extract(const torch::Tensor& images) override;
  std::vector<std::string> content_layers() const override { return {"relu3_3"}; }
  std::vector<std::string> style_layers() const override { return {"relu1_2", "relu2_2", "relu3_3", "relu4_3"}; }

  std::map<std::string, torch::Tensor> named_weights() const;

 private:
  Vgg16Extractor();
  struct Net;
  std::unique_ptr<Net> net_;
};

struct ExtractorConfig {
  std::string kind = "identity";  // none | identity | vgg16 | vgg16_random
  std::filesystem::path weights;
  bool allow_fallback = true;      // vgg16 without weights degrades to none, loudly
  uint64_t seed = 0;
};

/// nullptr means "no extractor": the perceptual terms are zero.
std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config);

struct PerceptualTerms {
  torch::Tensor content;
  torch::Tensor style;
};

/// Mean squared feature difference at the content layers, mean squared Gram difference at the
/// style layers. With no extractor both terms are zero (after a warning).
PerceptualTerms vgg_perceptual(const torch::Tensor& a, const torch::Tensor& b, FeatureExtractor* extractor);

struct RestorationTerms {
  torch::Tensor l1;
  torch::Tensor msssim_loss;
  torch::Tensor content;
  torch::Tensor style;
  torch::Tensor total;
};

/// l_res = alpha_res l1 + beta_res (1 - MS-SSIM) + gamma_res (content + style).
/// Terms whose weight is zero are not evaluated and reported as 0.
RestorationTerms restoration_loss(const torch::Tensor& adapted, const torch::Tensor& reference, const LossWeights& w,
                                  FeatureExtractor* extractor, const MsSsimOptions& msssim = {});

struct DetectionTerms {
  torch::Tensor box;
  torch::Tensor obj;
  torch::Tensor cls;
  torch::Tensor total;
  int64_t positives = 0;
};

/// Complete-IoU between [...,4] center-form boxes.
torch::Tensor ciou(const torch::Tensor& pred, const torch::Tensor& target);

/// l_box = mean (1 - CIoU) over positive slots; l_obj = BCE over all slots; l_cls = BCE over the
/// classes of positive slots. Batch means. No positives: l_box = l_cls = 0.
DetectionTerms detection_loss(const std::vector<torch::Tensor>& raw, const std::vector<detector::ScaleTargets>& targets,
                              const detector::DetectorConfig& config, const LossWeights& w);

void fill_restoration(LossBreakdown& b, const RestorationTerms& t);
void fill_detection(LossBreakdown& b, const DetectionTerms& t);

}  // namespace sdnia::losses
