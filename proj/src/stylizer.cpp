// SPDX-License-Identifier: Apache-2.0
#include "sdnia/stylizer.hpp"

#include <torch/script.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>

#include "sdnia/errors.hpp"
#include "sdnia/image.hpp"
#include "sdnia/log.hpp"

namespace sdnia::stylizer {

StyleVector ProceduralBackend::predict(const torch::Tensor& style_image) const {
  check_image(style_image, "style image");
  torch::NoGradGuard no_grad;
  const auto x = style_image.detach().to(torch::kFloat64).reshape({3, -1});
  const int64_t n = x.size(1);
  const auto lum = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];

  // Airlight: mean color of the brightest 1% of pixels.
  const int64_t k = std::max<int64_t>(1, n / 100);
  const auto brightest = std::get<1>(lum.topk(k));
  const auto airlight = x.index_select(1, brightest).mean(1);

  // Haze density from the per-pixel dark channel.
  const double dark = std::get<0>(x.min(0)).mean().item<double>();
  const double beta = -std::log(1.0 - std::clamp(dark, 0.0, 0.95));

  // Gamma that maps mid-gray onto the observed mean luminance.
  const double mean_lum = std::clamp(lum.mean().item<double>(), 1e-3, 1.0 - 1e-3);
  const double gamma = std::clamp(std::log(mean_lum) / std::log(0.5), 0.2, 5.0);

  const auto means = x.mean(1);
  const auto shift = means - means.mean();

  StyleVector v;
  v.values.resize(kDim);
  for (int c = 0; c < 3; ++c) {
    v.values[c] = airlight[c].item<double>();
    v.values[5 + c] = shift[c].item<double>();
  }
  v.values[3] = beta;
  v.values[4] = gamma;
  v.values[8] = contrast(style_image);
  return v;
}

torch::Tensor ProceduralBackend::transfer(const torch::Tensor& content, const StyleVector& style) const {
  check_image(content, "content image");
  if (style.dim() != kDim) {
    throw ArgumentError("procedural backend: style vector has dimension " + std::to_string(style.dim()) +
                        ", expected " + std::to_string(kDim));
  }
  torch::NoGradGuard no_grad;
  const StyleVector own = predict(content);
  const auto& v = style.values;
  const auto opts = torch::TensorOptions().dtype(content.scalar_type());
  torch::Tensor x = content.detach();

  const double g = v[4] / own.values[4];
  if (g != 1.0) x = x.clamp(0.0, 1.0).pow(g);

  const double beta = v[3] - own.values[3];
  if (beta > 0.0) {
    const double t = std::exp(-beta);
    const auto airlight = torch::tensor({v[0], v[1], v[2]}, opts).view({3, 1, 1});
    x = x * t + airlight * (1.0 - t);
  }

  const double d0 = v[5] - own.values[5], d1 = v[6] - own.values[6], d2 = v[7] - own.values[7];
  if (d0 != 0.0 || d1 != 0.0 || d2 != 0.0) {
    x = x + torch::tensor({d0, d1, d2}, opts).view({3, 1, 1});
  }

  const double current = contrast(x);
  if (current > 1e-6) {
    const double scale = std::clamp(v[8] / current, 0.25, 4.0);
    if (scale != 1.0) {
      const auto mid = luminance(x).mean();
      x = (x - mid) * scale + mid;
    }
  }
  return x.clamp(0.0, 1.0);
}

struct TorchScriptBackend::Modules {
  mutable torch::jit::script::Module predict;
  mutable torch::jit::script::Module transfer;
  mutable std::mutex mutex;
};

TorchScriptBackend::TorchScriptBackend(const std::filesystem::path& weights_dir)
    : dir_(weights_dir), modules_(std::make_unique<Modules>()) {
  try {
    modules_->predict = torch::jit::load((weights_dir / "predict.pt").string());
    modules_->transfer = torch::jit::load((weights_dir / "transfer.pt").string());
    modules_->predict.eval();
    modules_->transfer.eval();
  } catch (const std::exception& err) {
    throw BackendError("stylizer backend 'torchscript' (" + weights_dir.string() + ") failed to load: " + err.what());
  }
  dim_ = predict(constant_image(32, 32, 0.5)).dim();
  if (dim_ == 0) throw BackendError("stylizer backend 'torchscript' (" + weights_dir.string() + ") predicts empty vectors");
}

TorchScriptBackend::~TorchScriptBackend() = default;

std::string TorchScriptBackend::name() const { return "torchscript:" + dir_.string(); }

StyleVector TorchScriptBackend::predict(const torch::Tensor& style_image) const {
  check_image(style_image, "style image");
  torch::NoGradGuard no_grad;
  torch::Tensor out;
  {
    std::lock_guard lock(modules_->mutex);
    out = modules_->predict.forward({style_image.to(torch::kFloat32).unsqueeze(0)}).toTensor();
  }
  out = out.to(torch::kFloat64).flatten().contiguous();
  StyleVector v;
  v.values.assign(out.data_ptr<double>(), out.data_ptr<double>() + out.numel());
  for (double e : v.values) {
    if (!std::isfinite(e)) throw BackendError("stylizer backend '" + name() + "' produced a non-finite style vector");
  }
  return v;
}

torch::Tensor TorchScriptBackend::transfer(const torch::Tensor& content, const StyleVector& style) const {
  check_image(content, "content image");
  if (dim_ != 0 && style.dim() != dim_) {
    throw ArgumentError("torchscript backend: style vector has dimension " + std::to_string(style.dim()) +
                        ", expected " + std::to_string(dim_));
  }
  torch::NoGradGuard no_grad;
  auto vec = torch::tensor(style.values, torch::kFloat64).to(torch::kFloat32).unsqueeze(0);
  torch::Tensor out;
  {
    std::lock_guard lock(modules_->mutex);
    out = modules_->transfer.forward({content.to(torch::kFloat32).unsqueeze(0), vec}).toTensor();
  }
  out = out.squeeze(0).to(content.scalar_type());
  if (!out.sizes().equals(content.sizes())) {
    throw BackendError("stylizer backend '" + name() + "' changed the image size");
  }
  return out.clamp(0.0, 1.0);
}

std::unique_ptr<StylizerBackend> make_backend(const BackendConfig& config) {
  if (config.name == "procedural") return std::make_unique<ProceduralBackend>();
  if (config.name == "torchscript") {
    if (config.weights.empty()) throw BackendError("stylizer backend 'torchscript' requires a weights directory");
    return std::make_unique<TorchScriptBackend>(config.weights);
  }
  throw BackendError("unknown stylizer backend '" + config.name + "'");
}

StyleVector predict_style(const StylizerBackend& backend, const torch::Tensor& style_image) {
  StyleVector v = backend.predict(style_image);
  if (v.dim() != backend.dim()) {
    throw BackendError("stylizer backend '" + backend.name() + "' returned dimension " + std::to_string(v.dim()) +
                       ", declared " + std::to_string(backend.dim()));
  }
  return v;
}

StyleVector blend_style(const StyleVector& content, const StyleVector& style, double alpha) {
  if (content.dim() != style.dim()) {
    throw ArgumentError("blend_style: dimension mismatch (" + std::to_string(content.dim()) + " vs " +
                        std::to_string(style.dim()) + ")");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ArgumentError("blend_style: alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  StyleVector out;
  out.values.resize(content.dim());
  for (std::size_t i = 0; i < content.dim(); ++i) {
    out.values[i] = alpha * style.values[i] + (1.0 - alpha) * content.values[i];
  }
  return out;
}

StyleVector StyleCache::get_or_compute(const std::string& key, const std::function<StyleVector()>& compute) {
  if (auto hit = lookup(key)) return *hit;
  StyleVector value = compute();
  std::unique_lock lock(mutex_);
  return entries_.try_emplace(key, std::move(value)).first->second;
}

std::optional<StyleVector> StyleCache::lookup(const std::string& key) const {
  std::shared_lock lock(mutex_);
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  return std::nullopt;
}

void StyleCache::insert(const std::string& key, StyleVector value) {
  std::unique_lock lock(mutex_);
  entries_.insert_or_assign(key, std::move(value));
}

std::vector<std::pair<std::string, StyleVector>> StyleCache::snapshot() const {
  std::shared_lock lock(mutex_);
  std::vector<std::pair<std::string, StyleVector>> out(entries_.begin(), entries_.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::size_t StyleCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

std::string stylized_id(const std::string& content_id, const std::string& style_id, double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", alpha);
  return content_id + "__" + style_id + "__a" + buf;
}

std::optional<StylizedName> parse_stylized_id(const std::string& id) {
  const auto alpha_pos = id.rfind("__a");
  if (alpha_pos == std::string::npos) return std::nullopt;
  const auto style_pos = id.rfind("__", alpha_pos == 0 ? 0 : alpha_pos - 1);
  if (style_pos == std::string::npos || style_pos >= alpha_pos) return std::nullopt;
  StylizedName name;
  name.content_id = id.substr(0, style_pos);
  name.style_id = id.substr(style_pos + 2, alpha_pos - style_pos - 2);
  try {
    std::size_t used = 0;
    const std::string alpha_text = id.substr(alpha_pos + 3);
    name.alpha = std::stod(alpha_text, &used);
    if (used != alpha_text.size()) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (name.content_id.empty() || name.style_id.empty()) return std::nullopt;
  return name;
}

namespace {

StyleVector style_vector_for(const StylizerBackend& backend, const StyleImage& style, StyleCache* cache) {
  if (!cache) return predict_style(backend, style.pixels);
  return cache->get_or_compute("style/" + style.style_id, [&] { return predict_style(backend, style.pixels); });
}

}  // namespace

imagery::LabeledImage stylize(const StylizerBackend& backend, const imagery::LabeledImage& content,
                              const StyleImage& style, double alpha, StyleCache* cache) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ArgumentError("stylize: alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  const torch::Tensor pixels = content.has_pixels() ? content.pixels : load_image(content.image_path);
  const StyleVector own = cache ? cache->get_or_compute("content/" + content.image_id,
                                                        [&] { return predict_style(backend, pixels); })
                                : predict_style(backend, pixels);
  const StyleVector target = style_vector_for(backend, style, cache);

  imagery::LabeledImage out;
  out.image_id = stylized_id(content.image_id, style.style_id, alpha);
  out.boxes = content.boxes;
  out.origin = imagery::Origin::stylized;
  out.reference_id = content.image_id;
  out.pixels = backend.transfer(pixels, blend_style(own, target, alpha)).clamp(0.0, 1.0);
  if (!out.pixels.sizes().equals(pixels.sizes())) {
    throw BackendError("stylizer backend '" + backend.name() + "' changed the image size");
  }
  return out;
}

BatchResult batch_stylize(const StylizerBackend& backend, const imagery::DatasetManifest& contents,
                          const std::vector<StyleImage>& styles, const std::vector<double>& alphas,
                          const BatchOptions& options) {
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ArgumentError("batch_stylize: alpha " + std::to_string(a) + " outside [0,1]");
  }
  BatchResult result;
  result.manifest.name = contents.name + "_stylized";
  result.manifest.split = contents.split;
  result.manifest.class_names = contents.class_names;
  result.expected = contents.size() * styles.size() * alphas.size();
  if (result.expected == 0) return result;
  result.manifest.entries.reserve(result.expected);

  StyleCache local_cache;
  StyleCache* cache = options.cache ? options.cache : &local_cache;

  auto fail = [&](const std::string& what, std::size_t count) {
    log::warn("stylize: ", what);
    result.errors.push_back(what);
    result.failures += count;
  };

  std::vector<std::optional<StyleVector>> style_vectors;
  for (const auto& style : styles) {
    try {
      style_vectors.emplace_back(style_vector_for(backend, style, cache));
    } catch (const std::exception& err) {
      style_vectors.emplace_back(std::nullopt);
      fail("style '" + style.style_id + "': " + err.what(), contents.size() * alphas.size());
    }
  }

  for (const auto& content : contents.entries) {
    imagery::LabeledImage loaded;
    const imagery::LabeledImage* source = &content;
    if (!content.has_pixels()) {
      try {
        loaded = content;
        loaded.pixels = load_image(content.image_path);
        source = &loaded;
      } catch (const std::exception& err) {
        std::size_t live_styles = 0;
        for (const auto& v : style_vectors) live_styles += v.has_value();
        fail("content '" + content.image_id + "': " + err.what(), live_styles * alphas.size());
        continue;
      }
    }
    for (std::size_t s = 0; s < styles.size(); ++s) {
      if (!style_vectors[s]) continue;
      for (double alpha : alphas) {
        try {
          auto image = stylize(backend, *source, styles[s], alpha, cache);
          if (options.sink) options.sink(image);
          result.manifest.entries.push_back(std::move(image));
        } catch (const std::exception& err) {
          fail(stylized_id(content.image_id, styles[s].style_id, alpha) + ": " + err.what(), 1);
        }
      }
    }
  }
  return result;
}

}  // namespace sdnia::stylizer
