// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sdnia/checkpoint.hpp"
#include "sdnia/detector.hpp"
#include "sdnia/nia.hpp"

namespace sdnia {

/// NIA (optional) followed by the detector. With use_nia = false the module tree is exactly the
/// bare detector.
class SdniaModelImpl : public torch::nn::Module {
 public:
  SdniaModelImpl(detector::DetectorConfig config, bool use_nia);

  struct Output {
    torch::Tensor adapted;            // NIA output, or the input itself without NIA
    std::vector<torch::Tensor> raw;   // per-scale detector outputs
  };

  /// Training-time forward over [B,3,H,W].
  Output forward(const torch::Tensor& images);

  /// Inference: images only, no reference input. Switches to eval mode and disables autograd for
  /// the call. One NMS-filtered list per image.
  std::vector<std::vector<detector::Detection>> detect(const torch::Tensor& images,
                                                       std::optional<double> conf_threshold = std::nullopt);

  /// NIA output alone; identity when the model has no NIA.
  torch::Tensor adapt(const torch::Tensor& images);

  bool use_nia() const { return static_cast<bool>(nia_); }
  nia::NIANetwork& nia() { return nia_; }
  detector::TinyYolo& detector() { return detector_; }
  const detector::DetectorConfig& config() const { return detector_->config(); }

 private:
  nia::NIANetwork nia_{nullptr};
  detector::TinyYolo detector_{nullptr};
};
TORCH_MODULE(SdniaModel);

/// Weights under "nia/" and "detector/", with the detector config, NIA flag and class names in
/// the metadata.
Checkpoint model_checkpoint(SdniaModel& model, const std::vector<std::string>& class_names);

struct LoadedModel {
  SdniaModel model{nullptr};
  std::vector<std::string> class_names;
  nlohmann::json meta;
};

LoadedModel model_from_checkpoint(const Checkpoint& checkpoint);
LoadedModel load_model(const std::filesystem::path& path);

/// Bilinear resize of [3,H,W] or [B,3,H,W] to size x size.
torch::Tensor resize_square(const torch::Tensor& images, int64_t size);

}  // namespace sdnia
