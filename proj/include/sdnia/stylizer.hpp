// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "sdnia/imagery.hpp"

namespace sdnia::stylizer {

/// Fixed-length style embedding; the dimension is owned by the backend that produced it.
struct StyleVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  bool operator==(const StyleVector&) const = default;
};

/// Arbitrary style transfer split into style prediction and conditioned transfer, so the
/// stylization strength can be controlled by interpolating style vectors.
class StylizerBackend {
 public:
  virtual ~StylizerBackend() = default;

  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;

  /// Deterministic for a fixed backend and input.
  virtual StyleVector predict(const torch::Tensor& style_image) const = 0;

  /// Output keeps the content's spatial size and lies in [0, 1].
  virtual torch::Tensor transfer(const torch::Tensor& content, const StyleVector& style) const = 0;
};

/// Closed-form photometric stylizer with D = 9:
///   [0..2] airlight color, [3] haze density (beta), [4] gamma, [5..7] color shift, [8] contrast.
/// transfer() moves the content's own statistics toward the target vector; handing it the content's
/// own vector returns the content bit-for-bit.
class ProceduralBackend final : public StylizerBackend {
 public:
  static constexpr std::size_t kDim = 9;

  std::string name() const override { return "procedural"; }
  std::size_t dim() const override { return kDim; }
  StyleVector predict(const torch::Tensor& style_image) const override;
  torch::Tensor transfer(const torch::Tensor& content, const StyleVector& style) const override;
};

/// Serialized pretrained NST pair loaded from a directory holding `predict.pt` and `transfer.pt`
/// (TorchScript). predict: [1,3,H,W] -> [1,D]; transfer: ([1,3,H,W], [1,D]) -> [1,3,H,W].
class TorchScriptBackend final : public StylizerBackend {
 public:
  explicit TorchScriptBackend(const std::filesystem::path& weights_dir);
  ~TorchScriptBackend() override;

  std::string name() const override;
  std::size_t dim() const override { return dim_; }
  StyleVector predict(const torch::Tensor& style_image) const override;
  torch::Tensor transfer(const torch::Tensor& content, const StyleVector& style) const override;

 private:
  struct Modules;
  std::filesystem::path dir_;
  std::unique_ptr<Modules> modules_;
  std::size_t dim_ = 0;
};

struct BackendConfig {
  std::string name = "procedural";  // procedural | torchscript
  std::filesystem::path weights;
};

/// Throws BackendError naming the backend when it cannot be created.
std::unique_ptr<StylizerBackend> make_backend(const BackendConfig& config);

StyleVector predict_style(const StylizerBackend& backend, const torch::Tensor& style_image);

/// alpha * style + (1 - alpha) * content, elementwise.
StyleVector blend_style(const StyleVector& content, const StyleVector& style, double alpha);

/// Content style vectors keyed by image id. Concurrent readers, serialized insertion.
class StyleCache {
 public:
  StyleVector get_or_compute(const std::string& key, const std::function<StyleVector()>& compute);
  std::optional<StyleVector> lookup(const std::string& key) const;
  void insert(const std::string& key, StyleVector value);
  std::vector<std::pair<std::string, StyleVector>> snapshot() const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, StyleVector> entries_;
};

struct StyleImage {
  std::string style_id;
  torch::Tensor pixels;
};

/// "{content_id}__{style_id}__a{alpha:.2f}".
std::string stylized_id(const std::string& content_id, const std::string& style_id, double alpha);

struct StylizedName {
  std::string content_id;
  std::string style_id;
  double alpha = 0.0;
};
std::optional<StylizedName> parse_stylized_id(const std::string& id);

/// Pixels = transfer(content, blend(predict(content), predict(style), alpha)); boxes copied verbatim.
imagery::LabeledImage stylize(const StylizerBackend& backend, const imagery::LabeledImage& content,
                              const StyleImage& style, double alpha, StyleCache* cache = nullptr);

struct BatchOptions {
  /// Called once per produced image, in output order. It may persist the pixels, set image_path
  /// and release the tensor; the entry is appended to the manifest afterwards.
  std::function<void(imagery::LabeledImage&)> sink;
  StyleCache* cache = nullptr;
};

struct BatchResult {
  imagery::DatasetManifest manifest;
  std::size_t expected = 0;  // N_c * N_s * N_alpha
  std::size_t failures = 0;
  std::vector<std::string> errors;
};

/// Every (content, style, alpha) triple, content-major. Per-image failures are logged and skipped.
BatchResult batch_stylize(const StylizerBackend& backend, const imagery::DatasetManifest& contents,
                          const std::vector<StyleImage>& styles, const std::vector<double>& alphas,
                          const BatchOptions& options = {});

}  // namespace sdnia::stylizer
