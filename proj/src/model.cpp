// SPDX-License-Identifier: Apache-2.0
#include "sdnia/model.hpp"

#include "sdnia/errors.hpp"

namespace sdnia {

SdniaModelImpl::SdniaModelImpl(detector::DetectorConfig config, bool use_nia) {
  config.validate();
  if (use_nia) nia_ = register_module("nia", nia::NIANetwork());
  detector_ = register_module("detector", detector::TinyYolo(std::move(config)));
}

SdniaModelImpl::Output SdniaModelImpl::forward(const torch::Tensor& images) {
  Output out;
  out.adapted = adapt(images);
  out.raw = detector_->forward(out.adapted);
  return out;
}

torch::Tensor SdniaModelImpl::adapt(const torch::Tensor& images) {
  return nia_ ? nia_->forward(images) : images;
}

std::vector<std::vector<detector::Detection>> SdniaModelImpl::detect(const torch::Tensor& images,
                                                                     std::optional<double> conf_threshold) {
  const bool was_training = is_training();
  eval();
  torch::NoGradGuard no_grad;
  const auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  const auto raw = detector_->forward(adapt(batch));
  const auto& cfg = detector_->config();
  auto decoded = detector::decode_predictions(raw, cfg, conf_threshold.value_or(cfg.conf_threshold));
  for (auto& list : decoded) list = detector::nms(std::move(list), cfg.nms_iou_threshold);
  if (was_training) train();
  return decoded;
}

Checkpoint model_checkpoint(SdniaModel& model, const std::vector<std::string>& class_names) {
  Checkpoint ck;
  if (model->use_nia()) export_module(*model->nia(), "nia", ck);
  export_module(*model->detector(), "detector", ck);
  ck.meta["detector"] = model->config().to_json();
  ck.meta["use_nia"] = model->use_nia();
  ck.meta["class_names"] = class_names;
  return ck;
}

LoadedModel model_from_checkpoint(const Checkpoint& checkpoint) {
  if (!checkpoint.meta.contains("detector")) throw DataError("checkpoint has no detector configuration");
  LoadedModel out;
  const auto cfg = detector::DetectorConfig::from_json(checkpoint.meta.at("detector"));
  const bool use_nia = checkpoint.meta.value("use_nia", false);
  out.model = SdniaModel(cfg, use_nia);
  if (use_nia) import_module(*out.model->nia(), "nia", checkpoint);
  import_module(*out.model->detector(), "detector", checkpoint);
  out.class_names = checkpoint.meta.value("class_names", std::vector<std::string>{});
  if (static_cast<int>(out.class_names.size()) != cfg.num_classes) {
    throw DataError("checkpoint lists " + std::to_string(out.class_names.size()) + " class names for " +
                    std::to_string(cfg.num_classes) + " detector classes");
  }
  out.meta = checkpoint.meta;
  out.model->eval();
  return out;
}

LoadedModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

torch::Tensor resize_square(const torch::Tensor& images, int64_t size) {
  const bool single = images.dim() == 3;
  auto x = single ? images.unsqueeze(0) : images;
  if (x.size(2) == size && x.size(3) == size) return images;
  x = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<int64_t>{size, size})
             .mode(torch::kBilinear)
             .align_corners(false));
  return single ? x.squeeze(0) : x;
}

}  // namespace sdnia
