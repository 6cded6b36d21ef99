// SPDX-License-Identifier: Apache-2.0
#include "sdnia/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "sdnia/checkpoint.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/image.hpp"
#include "sdnia/log.hpp"

namespace sdnia::training {

using imagery::LabeledImage;
using imagery::Origin;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (image_size < 8) throw ConfigError("train: image_size must be >= 8");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train: val_fraction must lie in (0, 1)");
  if (flip_probability < 0.0 || flip_probability > 1.0) throw ConfigError("train: flip_probability must lie in [0, 1]");
  if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
  if (eval_conf_threshold < 0.0 || eval_conf_threshold > 1.0) {
    throw ConfigError("train: eval_conf_threshold must lie in [0, 1]");
  }
  loss_weights.validate();
  static const std::set<std::string> kinds{"none", "identity", "vgg16", "vgg16_random"};
  if (!kinds.count(extractor.kind)) throw ConfigError("train: unknown extractor '" + extractor.kind + "'");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"momentum", momentum},
          {"batch_size", batch_size},
          {"image_size", image_size},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"loss_weights", loss_weights.to_json()},
          {"seed", seed},
          {"use_stylized_data", use_stylized_data},
          {"use_nia", use_nia},
          {"res_on_originals", res_on_originals},
          {"val_fraction", val_fraction},
          {"flip_probability", flip_probability},
          {"grad_clip", grad_clip},
          {"eval_conf_threshold", eval_conf_threshold},
          {"extractor",
           {{"kind", extractor.kind},
            {"weights", extractor.weights.string()},
            {"allow_fallback", extractor.allow_fallback},
            {"seed", extractor.seed}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train: config section must be an object");
  try {
    if (j.contains("variant")) apply_variant(c, j.at("variant").get<std::string>());
    for (const auto& [key, v] : j.items()) {
      if (key == "variant") continue;
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "image_size") c.image_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "loss_weights") c.loss_weights = losses::LossWeights::from_json(v);
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "use_stylized_data") c.use_stylized_data = v.get<bool>();
      else if (key == "use_nia") c.use_nia = v.get<bool>();
      else if (key == "res_on_originals") c.res_on_originals = v.get<bool>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "flip_probability") c.flip_probability = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "eval_conf_threshold") c.eval_conf_threshold = v.get<double>();
      else if (key == "extractor" && v.is_string()) c.extractor.kind = v.get<std::string>();
      else if (key == "extractor") {
        c.extractor.kind = v.value("kind", c.extractor.kind);
        c.extractor.weights = v.value("weights", std::string());
        c.extractor.allow_fallback = v.value("allow_fallback", c.extractor.allow_fallback);
        c.extractor.seed = v.value("seed", c.extractor.seed);
      } else {
        throw ConfigError("train: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_variant(TrainConfig& config, const std::string& variant) {
  if (variant == "baseline") {
    config.use_stylized_data = false;
    config.use_nia = false;
  } else if (variant == "sd") {
    config.use_stylized_data = true;
    config.use_nia = false;
  } else if (variant == "nia") {
    config.use_stylized_data = false;
    config.use_nia = true;
  } else if (variant == "sdnia") {
    config.use_stylized_data = true;
    config.use_nia = true;
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected baseline, sd, nia or sdnia)");
  }
}

nlohmann::json TrainState::to_json() const {
  return {{"epoch", epoch},
          {"best_val_metric", std::isfinite(best_val_metric) ? nlohmann::json(best_val_metric) : nlohmann::json(nullptr)},
          {"best_epoch", best_epoch},
          {"epochs_since_improvement", epochs_since_improvement},
          {"best_checkpoint", best_checkpoint},
          {"last_checkpoint", last_checkpoint},
          {"rng_state", rng_state}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
  TrainState s;
  s.epoch = j.value("epoch", 0);
  if (j.contains("best_val_metric") && !j.at("best_val_metric").is_null()) {
    s.best_val_metric = j.at("best_val_metric").get<double>();
  }
  s.best_epoch = j.value("best_epoch", 0);
  s.epochs_since_improvement = j.value("epochs_since_improvement", 0);
  s.best_checkpoint = j.value("best_checkpoint", std::string());
  s.last_checkpoint = j.value("last_checkpoint", std::string());
  s.rng_state = j.value("rng_state", std::string());
  return s;
}

StopDecision early_stop_check(TrainState& state, double val_metric, int patience) {
  if (val_metric > state.best_val_metric) {
    state.best_val_metric = val_metric;
    state.best_epoch = state.epoch;
    state.epochs_since_improvement = 0;
  } else {
    ++state.epochs_since_improvement;
  }
  return state.epochs_since_improvement >= patience ? StopDecision::stop : StopDecision::proceed;
}

void add_references(ReferencePool& pool, const imagery::DatasetManifest& dataset) {
  for (const auto& e : dataset.entries) {
    if (e.origin == Origin::original) pool.insert_or_assign(e.image_id, e);
  }
}

namespace {

torch::Tensor pixels_of(const LabeledImage& item) {
  return item.pixels.defined() ? item.pixels : load_image(item.image_path);
}

bool wants_restoration(const LabeledImage& item, const TrainConfig& config) {
  return config.use_nia && (item.origin != Origin::original || config.res_on_originals);
}

}  // namespace

PreparedBatch prepare_batch(const std::vector<const LabeledImage*>& items, const ReferencePool& pool,
                            const TrainConfig& config, std::mt19937_64* rng, torch::Dtype dtype) {
  PreparedBatch out;
  std::vector<torch::Tensor> images, refs;
  std::vector<bool> mask;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const int64_t s = config.image_size;
  for (const auto* item : items) {
    const bool flip = rng != nullptr && coin(*rng) < config.flip_probability;
    const bool restore = wants_restoration(*item, config);
    torch::Tensor ref;
    if (restore) {
      if (item->origin == Origin::original) {
        ref = pixels_of(*item);
      } else {
        const auto it = pool.find(item->reference_id);
        if (it == pool.end()) {
          log::warn("training: dropping '", item->image_id, "': reference '", item->reference_id, "' not found");
          ++out.dropped;
          continue;
        }
        ref = pixels_of(it->second);
      }
    }
    auto img = resize_square(pixels_of(*item), s).to(dtype);
    ref = ref.defined() ? resize_square(ref, s).to(dtype) : img;
    auto boxes = item->boxes;
    if (flip) {
      img = img.flip({2});
      ref = ref.flip({2});
      for (auto& b : boxes) b.cx = 1.0 - b.cx;
    }
    images.push_back(img);
    refs.push_back(ref);
    mask.push_back(restore);
    out.boxes.push_back(std::move(boxes));
  }
  if (images.empty()) return out;
  out.images = torch::stack(images);
  out.references = torch::stack(refs);
  out.restoration_mask = torch::empty({static_cast<int64_t>(mask.size())}, torch::kBool);
  for (std::size_t i = 0; i < mask.size(); ++i) out.restoration_mask[static_cast<int64_t>(i)] = static_cast<bool>(mask[i]);
  return out;
}

StepLosses compute_losses(SdniaModel& model, const PreparedBatch& batch, const TrainConfig& config,
                          losses::FeatureExtractor* extractor) {
  if (!batch.images.defined() || batch.images.size(0) == 0) throw ArgumentError("compute_losses: empty batch");
  const auto& w = config.loss_weights;
  const auto& cfg = model->config();
  auto out = model->forward(batch.images);
  const auto targets = detector::build_targets(batch.boxes, cfg, batch.images.size(2), batch.images.size(3),
                                               batch.images.scalar_type());
  auto det = losses::detection_loss(out.raw, targets, cfg, w);

  StepLosses r;
  const auto zero = torch::zeros({}, batch.images.options());
  losses::RestorationTerms res{zero, zero, zero, zero, zero};
  if (model->use_nia() && w.p4 != 0.0 && batch.restoration_mask.any().item<bool>()) {
    const auto idx = batch.restoration_mask.nonzero().squeeze(1);
    res = losses::restoration_loss(out.adapted.index_select(0, idx), batch.references.index_select(0, idx), w,
                                   extractor);
  }
  r.total = losses::total_sum(w, det.box, det.obj, det.cls, res.total);
  losses::fill_detection(r.breakdown, det);
  losses::fill_restoration(r.breakdown, res);
  r.breakdown.l_total = r.total.item<double>();
  r.positives = det.positives;
  return r;
}

namespace {

losses::LossBreakdown optimize(SdniaModel& model, torch::optim::Optimizer& optimizer, const PreparedBatch& batch,
                               const TrainConfig& config, losses::FeatureExtractor* extractor) {
  model->train();
  optimizer.zero_grad();
  auto step = compute_losses(model, batch, config, extractor);
  if (!std::isfinite(step.breakdown.l_total)) {
    std::ostringstream os;
    os << "non-finite loss " << step.breakdown.to_json().dump();
    throw DivergenceError(os.str());
  }
  step.total.backward();
  if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip);
  optimizer.step();
  return step.breakdown;
}

void accumulate(losses::LossBreakdown& acc, const losses::LossBreakdown& b, double scale) {
  acc.l_box += scale * b.l_box;
  acc.l_obj += scale * b.l_obj;
  acc.l_cls += scale * b.l_cls;
  acc.l_l1 += scale * b.l_l1;
  acc.l_msssim += scale * b.l_msssim;
  acc.l_vgg_content += scale * b.l_vgg_content;
  acc.l_vgg_style += scale * b.l_vgg_style;
  acc.l_res += scale * b.l_res;
  acc.l_det += scale * b.l_det;
  acc.l_total += scale * b.l_total;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& text) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw DataError("training: corrupt RNG state in checkpoint");
}

torch::Tensor optimizer_bytes(torch::optim::Optimizer& optimizer) {
  std::ostringstream os;
  torch::save(optimizer, os);
  const auto s = os.str();
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), s.data(), s.size());
  return t;
}

void load_optimizer(torch::optim::Optimizer& optimizer, const torch::Tensor& bytes) {
  const auto t = bytes.contiguous();
  std::istringstream is(std::string(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.numel())));
  torch::load(optimizer, is);
}

imagery::DatasetManifest select_variant_data(const imagery::DatasetManifest& data, const TrainConfig& config) {
  if (config.use_stylized_data) return data;
  imagery::DatasetManifest out = data;
  out.entries.clear();
  for (const auto& e : data.entries) {
    if (e.origin != Origin::stylized) out.entries.push_back(e);
  }
  return out;
}

void append_line(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::app);
  out << j.dump() << "\n";
}

}  // namespace

losses::LossBreakdown joint_step(SdniaModel& model, torch::optim::Optimizer& optimizer,
                                 const std::vector<const LabeledImage*>& batch, const ReferencePool& pool,
                                 const TrainConfig& config, losses::FeatureExtractor* extractor, std::mt19937_64* rng) {
  const auto prepared = prepare_batch(batch, pool, config, rng, model->parameters().front().scalar_type());
  if (!prepared.images.defined()) {
    log::warn("training: every item of the batch was dropped; step skipped");
    return {};
  }
  return optimize(model, optimizer, prepared, config, extractor);
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"train_loss", train_loss.to_json()},
          {"val_map_50", val_map_50},
          {"improved", improved},
          {"seconds", seconds}};
}

TrainResult train(const TrainConfig& config, const detector::DetectorConfig& detector_config,
                  const imagery::DatasetManifest& train_set_in, const imagery::DatasetManifest& val_set_in,
                  const TrainOptions& options) {
  config.validate();
  detector_config.validate();
  if (detector_config.num_classes != static_cast<int>(train_set_in.class_names.size())) {
    throw ConfigError("train: detector has " + std::to_string(detector_config.num_classes) +
                      " classes but the training set lists " + std::to_string(train_set_in.class_names.size()));
  }
  if (config.image_size % detector_config.max_scale() != 0) {
    throw ConfigError("train: image_size " + std::to_string(config.image_size) + " must be a multiple of " +
                      std::to_string(detector_config.max_scale()));
  }
  const auto train_set = select_variant_data(train_set_in, config);
  const auto val_set = select_variant_data(val_set_in, config);
  if (train_set.entries.empty()) throw ArgumentError("train: empty training set");
  if (val_set.entries.empty() && !options.validator) throw ArgumentError("train: empty validation set");

  torch::manual_seed(config.seed);
  TrainResult result;
  result.model = SdniaModel(detector_config, config.use_nia);
  auto& model = result.model;
  torch::optim::SGD optimizer(model->parameters(),
                              torch::optim::SGDOptions(config.learning_rate).momentum(config.momentum));
  std::unique_ptr<losses::FeatureExtractor> extractor;
  if (config.use_nia && config.loss_weights.p4 > 0.0 && config.loss_weights.gamma_res > 0.0) {
    extractor = losses::make_extractor(config.extractor);
  }

  ReferencePool pool;
  add_references(pool, train_set_in);
  add_references(pool, val_set_in);

  std::mt19937_64 rng(config.seed);
  auto& state = result.state;
  const auto& dir = options.run_dir;
  const bool persist = !dir.empty();
  const auto last_path = dir / "last.ckpt";
  const auto best_path = dir / "best.ckpt";
  const auto history_path = dir / "history.jsonl";
  const auto steps_path = dir / "steps.jsonl";
  Checkpoint best_snapshot;

  auto snapshot = [&]() {
    auto ck = model_checkpoint(model, train_set.class_names);
    ck.meta["train_config"] = config.to_json();
    return ck;
  };

  if (persist) std::filesystem::create_directories(dir);
  if (options.resume) {
    if (!persist || !std::filesystem::exists(last_path)) throw ConfigError("train: nothing to resume in " + dir.string());
    const auto ck = load_checkpoint(last_path);
    if (ck.meta.value("use_nia", false) != config.use_nia) throw ConfigError("train: resume checkpoint has a different NIA setting");
    if (config.use_nia) import_module(*model->nia(), "nia", ck);
    import_module(*model->detector(), "detector", ck);
    const auto opt = ck.tensors.find("optim/state");
    if (opt != ck.tensors.end()) load_optimizer(optimizer, opt->second);
    state = TrainState::from_json(ck.meta.at("train_state"));
    rng_from_string(rng, state.rng_state);
    if (std::filesystem::exists(best_path)) {
      best_snapshot = load_checkpoint(best_path);
    } else {
      best_snapshot = ck;
    }
    if (std::filesystem::exists(history_path)) {
      std::ifstream in(history_path);
      std::string line;
      std::vector<std::string> kept;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.value("epoch", 0) > state.epoch) continue;
        EpochRecord rec;
        rec.epoch = j.value("epoch", 0);
        rec.val_map_50 = j.value("val_map_50", 0.0);
        rec.improved = j.value("improved", false);
        rec.seconds = j.value("seconds", 0.0);
        result.history.push_back(rec);
        kept.push_back(line);
      }
      std::ofstream out(history_path, std::ios::trunc);
      for (const auto& k : kept) out << k << "\n";
    }
    log::info("training: resumed after epoch ", state.epoch);
    if (state.epochs_since_improvement >= config.patience) result.early_stopped = true;
  } else if (persist) {
    std::filesystem::remove(history_path);
    std::filesystem::remove(steps_path);
  }

  std::vector<std::size_t> order(train_set.entries.size());
  for (int epoch = state.epoch + 1; epoch <= config.max_epochs && !result.early_stopped; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    losses::LossBreakdown sum;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const LabeledImage*> items;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(config.batch_size)); ++k) {
        items.push_back(&train_set.entries[order[k]]);
      }
      const auto prepared = prepare_batch(items, pool, config, &rng);
      if (!prepared.images.defined()) continue;
      losses::LossBreakdown b;
      try {
        b = optimize(model, optimizer, prepared, config, extractor.get());
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                              (persist && std::filesystem::exists(last_path)
                                   ? "; last good checkpoint: " + last_path.string()
                                   : std::string("; no checkpoint written yet")));
      }
      accumulate(sum, b, 1.0);
      ++steps;
      if (persist && options.log_steps) {
        auto j = b.to_json();
        j["epoch"] = epoch;
        j["step"] = steps;
        append_line(steps_path, j);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    if (steps > 0) accumulate(rec.train_loss, sum, 1.0 / steps);

    state.epoch = epoch;
    double metric = 0.0;
    if (options.validator) {
      metric = options.validator(epoch, model);
    } else {
      const auto report =
          evaluation::evaluate_model(model, val_set, config.image_size, config.eval_conf_threshold, {0.5});
      metric = std::isnan(report.map_50) ? 0.0 : report.map_50;
    }
    rec.val_map_50 = metric;
    const auto decision = early_stop_check(state, metric, config.patience);
    rec.improved = state.best_epoch == epoch;
    if (rec.improved) {
      best_snapshot = snapshot();
      if (persist) {
        state.best_checkpoint = best_path.string();
        best_snapshot.meta["train_state"] = state.to_json();
        save_checkpoint(best_snapshot, best_path);
      }
    }
    state.rng_state = rng_to_string(rng);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (persist) {
      state.last_checkpoint = last_path.string();
      auto last = snapshot();
      last.meta["train_state"] = state.to_json();
      last.tensors["optim/state"] = optimizer_bytes(optimizer);
      save_checkpoint(last, last_path);
      append_line(history_path, rec.to_json());
    }
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    log::info("epoch ", epoch, ": loss ", rec.train_loss.l_total, ", val mAP@.5 ", metric, rec.improved ? " *" : "");
    if (decision == StopDecision::stop) result.early_stopped = true;
  }

  if (!best_snapshot.tensors.empty()) {
    if (config.use_nia) import_module(*model->nia(), "nia", best_snapshot);
    import_module(*model->detector(), "detector", best_snapshot);
  }
  model->eval();
  return result;
}

}  // namespace sdnia::training
