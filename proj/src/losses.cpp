// SPDX-License-Identifier: Apache-2.0
#include "sdnia/losses.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "sdnia/checkpoint.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/image.hpp"
#include "sdnia/log.hpp"

namespace sdnia::losses {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  const double all[] = {alpha_res, beta_res, gamma_res, p1, p2, p3, p4};
  for (double v : all) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and non-negative");
  }
}

nlohmann::json LossWeights::to_json() const {
  return {{"alpha_res", alpha_res}, {"beta_res", beta_res}, {"gamma_res", gamma_res},
          {"p1", p1},               {"p2", p2},             {"p3", p3},
          {"p4", p4}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.alpha_res = j.value("alpha_res", w.alpha_res);
  w.beta_res = j.value("beta_res", w.beta_res);
  w.gamma_res = j.value("gamma_res", w.gamma_res);
  w.p1 = j.value("p1", w.p1);
  w.p2 = j.value("p2", w.p2);
  w.p3 = j.value("p3", w.p3);
  w.p4 = j.value("p4", w.p4);
  w.validate();
  return w;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"l_box", l_box},
          {"l_obj", l_obj},
          {"l_cls", l_cls},
          {"l_l1", l_l1},
          {"l_msssim", l_msssim},
          {"l_vgg_content", l_vgg_content},
          {"l_vgg_style", l_vgg_style},
          {"l_res", l_res},
          {"l_det", l_det},
          {"l_total", l_total}};
}

void finalize(LossBreakdown& b, const LossWeights& w) {
  b.l_res = restoration_sum(w, b.l_l1, b.l_msssim, b.l_vgg_content, b.l_vgg_style);
  b.l_det = detection_sum(w, b.l_box, b.l_obj, b.l_cls);
  b.l_total = total_sum(w, b.l_box, b.l_obj, b.l_cls, b.l_res);
}

double total_loss(const LossBreakdown& det, const LossBreakdown& res, const LossWeights& w) {
  return total_sum(w, det.l_box, det.l_obj, det.l_cls, res.l_res);
}

torch::Tensor l1_loss(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ArgumentError("l1_loss: shape mismatch");
  return (a - b).abs().mean();
}

// ---------------------------------------------------------------------------------------------
// MS-SSIM

const std::vector<double>& ms_ssim_weights() {
  static const std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

int ms_ssim_levels_for(int64_t min_side, int window, int max_levels) {
  for (int l = max_levels; l >= 1; --l) {
    if (min_side >= (int64_t{1} << (l - 1)) * window) return l;
  }
  return 0;
}

namespace {

torch::Tensor gaussian_1d(int size, double sigma, const torch::TensorOptions& opts) {
  auto x = torch::arange(size, opts) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(x * x) / (2.0 * sigma * sigma));
  return g / g.sum();
}

// Valid separable filtering of [B,1,H,W].
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
  const int64_t n = g.size(0);
  auto y = F::conv2d(x, g.view({1, 1, 1, n}));
  return F::conv2d(y, g.view({1, 1, n, 1}));
}

// Negative per-level terms are clipped. A small floor instead of zero keeps pow() differentiable.
constexpr double kMinTerm = 1e-12;

torch::Tensor as_luma_batch(const torch::Tensor& t) {
  auto x = t.dim() == 3 ? t.unsqueeze(0) : t;
  if (x.dim() != 4) throw ArgumentError("ms_ssim: expected [3,H,W] or [B,3,H,W]");
  if (x.size(1) == 1) return x;
  if (x.size(1) != 3) throw ArgumentError("ms_ssim: expected 1 or 3 channels");
  return luminance(x);
}

}  // namespace

torch::Tensor ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimOptions& options) {
  if (!a.sizes().equals(b.sizes())) throw ArgumentError("ms_ssim: shape mismatch");
  if (options.levels < 1 || options.levels > static_cast<int>(ms_ssim_weights().size())) {
    throw ArgumentError("ms_ssim: levels must be in [1, 5]");
  }
  if (options.window < 1 || options.window % 2 == 0) throw ArgumentError("ms_ssim: window must be odd");
  auto x = as_luma_batch(a);
  auto y = as_luma_batch(b);
  const int64_t min_side = std::min(x.size(2), x.size(3));

  int levels = options.levels;
  const int64_t needed = (int64_t{1} << (levels - 1)) * options.window;
  if (min_side < needed) {
    if (!options.auto_reduce) {
      std::ostringstream os;
      os << "ms_ssim: " << levels << " levels need images of at least " << needed << "x" << needed << ", got "
         << x.size(2) << "x" << x.size(3);
      throw ArgumentError(os.str());
    }
    levels = ms_ssim_levels_for(min_side, options.window, levels);
    if (levels == 0) {
      std::ostringstream os;
      os << "ms_ssim: images must be at least " << options.window << "x" << options.window << ", got " << x.size(2)
         << "x" << x.size(3);
      throw ArgumentError(os.str());
    }
  }

  std::vector<double> weights(ms_ssim_weights().begin(), ms_ssim_weights().begin() + levels);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  for (double& w : weights) w /= wsum;

  const double c1 = std::pow(options.k1 * options.data_range, 2);
  const double c2 = std::pow(options.k2 * options.data_range, 2);
  const auto g = gaussian_1d(options.window, options.sigma, x.options());

  auto result = torch::ones({x.size(0)}, x.options());
  for (int l = 0; l < levels; ++l) {
    auto mu_x = blur(x, g);
    auto mu_y = blur(y, g);
    auto sxx = blur(x * x, g) - mu_x * mu_x;
    auto syy = blur(y * y, g) - mu_y * mu_y;
    auto sxy = blur(x * y, g) - mu_x * mu_y;
    auto cs_map = (2.0 * sxy + c2) / (sxx + syy + c2);
    if (l + 1 < levels) {
      auto cs = cs_map.mean({1, 2, 3}).clamp_min(kMinTerm);
      result = result * torch::pow(cs, weights[l]);
      x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2).stride(2));
      y = F::avg_pool2d(y, F::AvgPool2dFuncOptions(2).stride(2));
    } else {
      auto lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1);
      auto ssim = (lum * cs_map).mean({1, 2, 3}).clamp_min(kMinTerm);
      result = result * torch::pow(ssim, weights[l]);
    }
  }
  return result.mean();
}

torch::Tensor gram_matrix(const torch::Tensor& features) {
  auto f = features.dim() == 3 ? features.unsqueeze(0) : features;
  if (f.dim() != 4) throw ArgumentError("gram_matrix: expected [C,H,W] or [B,C,H,W]");
  const auto bsz = f.size(0), c = f.size(1), hw = f.size(2) * f.size(3);
  auto flat = f.reshape({bsz, c, hw});
  auto g = torch::bmm(flat, flat.transpose(1, 2)) / static_cast<double>(c * hw);
  return features.dim() == 3 ? g.squeeze(0) : g;
}

// ---------------------------------------------------------------------------------------------
// Feature extractors

std::map<std::string, torch::Tensor> IdentityExtractor::extract(const torch::Tensor& images) {
  return {{"pixels", images}};
}

struct Vgg16Extractor::Net : torch::nn::Module {
  struct Layer {
    std::string name;
    torch::nn::Conv2d conv{nullptr};
    bool pool_after = false;
    bool tap = false;
  };
  std::vector<Layer> layers;

  Net() {
    // block, convs in block, out channels
    const int spec[4][2] = {{2, 64}, {2, 128}, {3, 256}, {3, 512}};
    int64_t in = 3;
    for (int blk = 0; blk < 4; ++blk) {
      for (int k = 0; k < spec[blk][0]; ++k) {
        Layer layer;
        layer.name = std::to_string(blk + 1) + "_" + std::to_string(k + 1);
        layer.conv = register_module("conv" + layer.name,
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(in, spec[blk][1], 3).padding(1)));
        in = spec[blk][1];
        const bool last = k + 1 == spec[blk][0];
        layer.tap = last;
        layer.pool_after = last && blk < 3;
        layers.push_back(std::move(layer));
      }
    }
  }

  std::map<std::string, torch::Tensor> forward(const torch::Tensor& images) {
    static const auto mean = torch::tensor({0.485, 0.456, 0.406}).view({1, 3, 1, 1});
    static const auto stdev = torch::tensor({0.229, 0.224, 0.225}).view({1, 3, 1, 1});
    auto x = (images - mean.to(images.dtype())) / stdev.to(images.dtype());
    std::map<std::string, torch::Tensor> out;
    for (auto& layer : layers) {
      x = torch::relu(layer.conv->forward(x));
      if (layer.tap) out.emplace("relu" + layer.name, x);
      if (layer.pool_after) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
    }
    return out;
  }
};

Vgg16Extractor::Vgg16Extractor() : net_(std::make_unique<Net>()) {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
  net_->eval();
}

Vgg16Extractor::Vgg16Extractor(const std::filesystem::path& weights) : Vgg16Extractor() {
  const auto ck = load_checkpoint(weights);
  import_module(*net_, "vgg", ck);
}

Vgg16Extractor::~Vgg16Extractor() = default;

std::unique_ptr<Vgg16Extractor> Vgg16Extractor::random(uint64_t seed) {
  std::unique_ptr<Vgg16Extractor> e(new Vgg16Extractor());
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& layer : e->net_->layers) {
    auto& w = layer.conv->weight;
    const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
    w.copy_(at::normal(0.0, std::sqrt(2.0 / fan_in), w.sizes(), gen));
    layer.conv->bias.zero_();
  }
  return e;
}

std::map<std::string, torch::Tensor> Vgg16Extractor::extract(const torch::Tensor& images) {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3) throw ArgumentError("vgg16: expected [B,3,H,W]");
  if (x.scalar_type() != torch::kFloat32) {
    net_->to(x.scalar_type());
  }
  return net_->forward(x);
}

std::map<std::string, torch::Tensor> Vgg16Extractor::named_weights() const {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : net_->named_parameters(true)) out.emplace(item.key(), item.value());
  return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config) {
  if (config.kind == "none") return nullptr;
  if (config.kind == "identity") return std::make_unique<IdentityExtractor>();
  if (config.kind == "vgg16_random") return Vgg16Extractor::random(config.seed);
  if (config.kind == "vgg16") {
    if (config.weights.empty() || !std::filesystem::exists(config.weights)) {
      if (!config.allow_fallback) {
        throw ConfigError("vgg16 extractor: weights not found at '" + config.weights.string() + "'");
      }
      log::warn("vgg16 weights not found at '", config.weights.string(),
                "'; perceptual loss terms are DISABLED (reported as 0)");
      return nullptr;
    }
    return std::make_unique<Vgg16Extractor>(config.weights);
  }
  throw ConfigError("unknown feature extractor '" + config.kind + "'");
}

PerceptualTerms vgg_perceptual(const torch::Tensor& a, const torch::Tensor& b, FeatureExtractor* extractor) {
  if (!a.sizes().equals(b.sizes())) throw ArgumentError("vgg_perceptual: shape mismatch");
  if (extractor == nullptr) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) log::warn("no feature extractor configured; perceptual loss terms are 0");
    auto zero = torch::zeros({}, a.options());
    return {zero, zero};
  }
  auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
  auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
  const auto fx = extractor->extract(x);
  const auto fy = extractor->extract(y);
  auto layer = [&](const std::map<std::string, torch::Tensor>& m, const std::string& name) {
    const auto it = m.find(name);
    if (it == m.end()) throw BackendError(extractor->name() + ": missing feature layer '" + name + "'");
    return it->second;
  };

  auto content = torch::zeros({}, a.options());
  const auto content_layers = extractor->content_layers();
  for (const auto& name : content_layers) {
    content = content + (layer(fx, name) - layer(fy, name)).pow(2).mean();
  }
  content = content / static_cast<double>(content_layers.size());

  auto style = torch::zeros({}, a.options());
  const auto style_layers = extractor->style_layers();
  for (const auto& name : style_layers) {
    style = style + (gram_matrix(layer(fx, name)) - gram_matrix(layer(fy, name))).pow(2).mean();
  }
  style = style / static_cast<double>(style_layers.size());
  return {content, style};
}

RestorationTerms restoration_loss(const torch::Tensor& adapted, const torch::Tensor& reference, const LossWeights& w,
                                  FeatureExtractor* extractor, const MsSsimOptions& msssim) {
  if (!adapted.sizes().equals(reference.sizes())) {
    std::ostringstream os;
    os << "restoration_loss: adapted " << adapted.sizes() << " and reference " << reference.sizes() << " differ";
    throw ArgumentError(os.str());
  }
  const auto zero = torch::zeros({}, adapted.options());
  RestorationTerms t{zero, zero, zero, zero, zero};
  if (w.alpha_res != 0.0) t.l1 = losses::l1_loss(adapted, reference);
  if (w.beta_res != 0.0) t.msssim_loss = 1.0 - ms_ssim(adapted, reference, msssim);
  if (w.gamma_res != 0.0) {
    auto p = vgg_perceptual(adapted, reference, extractor);
    t.content = p.content;
    t.style = p.style;
  }
  t.total = restoration_sum(w, t.l1, t.msssim_loss, t.content, t.style);
  return t;
}

// ---------------------------------------------------------------------------------------------
// Detection

torch::Tensor ciou(const torch::Tensor& pred, const torch::Tensor& target) {
  constexpr double eps = 1e-9;
  auto px = pred.select(-1, 0), py = pred.select(-1, 1), pw = pred.select(-1, 2), ph = pred.select(-1, 3);
  auto tx = target.select(-1, 0), ty = target.select(-1, 1), tw = target.select(-1, 2), th = target.select(-1, 3);
  auto p1x = px - pw / 2, p2x = px + pw / 2, p1y = py - ph / 2, p2y = py + ph / 2;
  auto t1x = tx - tw / 2, t2x = tx + tw / 2, t1y = ty - th / 2, t2y = ty + th / 2;

  auto iw = (torch::min(p2x, t2x) - torch::max(p1x, t1x)).clamp_min(0);
  auto ih = (torch::min(p2y, t2y) - torch::max(p1y, t1y)).clamp_min(0);
  auto inter = iw * ih;
  auto uni = pw * ph + tw * th - inter + eps;
  auto iou = inter / uni;

  auto cw = torch::max(p2x, t2x) - torch::min(p1x, t1x);
  auto ch = torch::max(p2y, t2y) - torch::min(p1y, t1y);
  auto c2 = cw * cw + ch * ch + eps;
  auto rho2 = (px - tx).pow(2) + (py - ty).pow(2);
  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  auto v = k * (torch::atan(tw / (th + eps)) - torch::atan(pw / (ph + eps))).pow(2);
  // alpha stays in the graph so the gradient is the exact derivative of the reported loss.
  const auto alpha = v / (v - iou + (1.0 + eps));
  return iou - (rho2 / c2 + v * alpha);
}

DetectionTerms detection_loss(const std::vector<torch::Tensor>& raw, const std::vector<detector::ScaleTargets>& targets,
                              const detector::DetectorConfig& config, const LossWeights& w) {
  if (raw.empty() || raw.size() != targets.size() || raw.size() != config.grid_scales.size()) {
    throw ArgumentError("detection_loss: one raw tensor and one target set per scale expected");
  }
  if (raw.front().size(0) == 0) throw ArgumentError("detection_loss: empty batch");
  const auto opts = raw.front().options();
  auto box_sum = torch::zeros({}, opts);
  auto obj_sum = torch::zeros({}, opts);
  auto cls_sum = torch::zeros({}, opts);
  int64_t slots = 0;
  int64_t positives = 0;
  const int64_t num_classes = config.num_classes;

  for (std::size_t s = 0; s < raw.size(); ++s) {
    const auto& r = raw[s];
    const auto& t = targets[s];
    if (r.dim() != 5 || r.size(4) != 5 + num_classes) throw ArgumentError("detection_loss: malformed raw output");
    const auto pos = t.positive.to(torch::kBool);
    if (!pos.sizes().equals(r.sizes().slice(0, 4))) throw ArgumentError("detection_loss: target grid mismatch");

    auto obj_logits = r.select(-1, 4);
    obj_sum = obj_sum + F::binary_cross_entropy_with_logits(
                            obj_logits, pos.to(r.scalar_type()),
                            F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kSum));
    slots += obj_logits.numel();

    const auto idx = pos.nonzero();  // [P, 4] = (b, row, col, anchor)
    const int64_t p = idx.size(0);
    if (p == 0) continue;
    positives += p;
    auto pred = r.index({pos});  // [P, 5 + C]
    const auto rows = static_cast<double>(r.size(1));
    const auto cols = static_cast<double>(r.size(2));
    std::vector<double> aw, ah;
    for (const auto& a : config.anchors[s]) {
      aw.push_back(a.w);
      ah.push_back(a.h);
    }
    auto anchor_idx = idx.select(1, 3);
    auto anchor_w = torch::tensor(aw, opts).index_select(0, anchor_idx);
    auto anchor_h = torch::tensor(ah, opts).index_select(0, anchor_idx);
    auto col = idx.select(1, 2).to(r.scalar_type());
    auto row = idx.select(1, 1).to(r.scalar_type());
    auto cx = (col + torch::sigmoid(pred.select(1, 0))) / cols;
    auto cy = (row + torch::sigmoid(pred.select(1, 1))) / rows;
    auto bw = anchor_w * torch::exp(pred.select(1, 2).clamp_max(10.0));
    auto bh = anchor_h * torch::exp(pred.select(1, 3).clamp_max(10.0));
    auto pbox = torch::stack({cx, cy, bw, bh}, 1);
    auto tbox = t.boxes.index({pos}).to(r.scalar_type());
    box_sum = box_sum + (1.0 - ciou(pbox, tbox)).sum();
    cls_sum = cls_sum + F::binary_cross_entropy_with_logits(
                            pred.slice(1, 5), t.classes.index({pos}).to(r.scalar_type()),
                            F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kSum));
  }

  DetectionTerms out;
  out.positives = positives;
  out.obj = obj_sum / static_cast<double>(slots);
  if (positives > 0) {
    out.box = box_sum / static_cast<double>(positives);
    out.cls = cls_sum / static_cast<double>(positives * std::max<int64_t>(1, num_classes));
  } else {
    out.box = box_sum;
    out.cls = cls_sum;
  }
  out.total = detection_sum(w, out.box, out.obj, out.cls);
  return out;
}

void fill_restoration(LossBreakdown& b, const RestorationTerms& t) {
  b.l_l1 = t.l1.item<double>();
  b.l_msssim = t.msssim_loss.item<double>();
  b.l_vgg_content = t.content.item<double>();
  b.l_vgg_style = t.style.item<double>();
  b.l_res = t.total.item<double>();
}

void fill_detection(LossBreakdown& b, const DetectionTerms& t) {
  b.l_box = t.box.item<double>();
  b.l_obj = t.obj.item<double>();
  b.l_cls = t.cls.item<double>();
  b.l_det = t.total.item<double>();
}

}  // namespace sdnia::losses
