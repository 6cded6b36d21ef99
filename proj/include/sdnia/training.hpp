// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "sdnia/detector.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/losses.hpp"
#include "sdnia/model.hpp"

namespace sdnia::training {

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batch_size = 4;
  int image_size = 544;
  int max_epochs = 400;
  int patience = 10;
  losses::LossWeights loss_weights;
  std::uint64_t seed = 0;
  bool use_stylized_data = true;
  bool use_nia = true;
  bool res_on_originals = true;   // originals are their own restoration reference
  double val_fraction = 0.1;
  double flip_probability = 0.5;  // horizontal flip augmentation
  double grad_clip = 0.0;         // global norm; 0 disables
  double eval_conf_threshold = 0.01;
  losses::ExtractorConfig extractor;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys throw ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Named presets: baseline (no SD, no NIA), sd, nia, sdnia.
void apply_variant(TrainConfig& config, const std::string& variant);

enum class StopDecision { proceed, stop };

struct TrainState {
  int epoch = 0;  // completed epochs
  double best_val_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_improvement = 0;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string rng_state;  // serialized std::mt19937_64

  nlohmann::json to_json() const;
  static TrainState from_json(const nlohmann::json& j);
};

/// Records `val_metric` for the current epoch. Improvement means strictly greater than the best so
/// far and resets the counter; stop iff the counter reaches `patience`.
StopDecision early_stop_check(TrainState& state, double val_metric, int patience);

/// Clean references by image id. Entries may hold pixels or only an image path.
using ReferencePool = std::unordered_map<std::string, imagery::LabeledImage>;

/// Adds the originals of `dataset` to `pool`.
void add_references(ReferencePool& pool, const imagery::DatasetManifest& dataset);

/// Batch tensors after resolution, resizing and augmentation.
struct PreparedBatch {
  torch::Tensor images;                              // [B,3,S,S]
  torch::Tensor references;                          // [B,3,S,S]; rows without restoration are undefined content
  torch::Tensor restoration_mask;                    // [B] bool
  std::vector<std::vector<imagery::BoundingBox>> boxes;
  std::size_t dropped = 0;
};

/// Resolves pixels and references, resizes to image_size and applies flips from `rng`. Items whose
/// reference cannot be resolved are dropped with a warning.
PreparedBatch prepare_batch(const std::vector<const imagery::LabeledImage*>& items, const ReferencePool& pool,
                            const TrainConfig& config, std::mt19937_64* rng, torch::Dtype dtype = torch::kFloat32);

struct StepLosses {
  torch::Tensor total;
  losses::LossBreakdown breakdown;
  int64_t positives = 0;
};

/// Both pipelines on a prepared batch: restoration against the references for masked rows, detection
/// on the adapted images, combined into l_total. No optimizer step.
StepLosses compute_losses(SdniaModel& model, const PreparedBatch& batch, const TrainConfig& config,
                          losses::FeatureExtractor* extractor);

/// One optimization step: single backward pass through l_total, updating NIA and detector together.
/// Throws DivergenceError on a non-finite loss (parameters untouched).
losses::LossBreakdown joint_step(SdniaModel& model, torch::optim::Optimizer& optimizer,
                                 const std::vector<const imagery::LabeledImage*>& batch, const ReferencePool& pool,
                                 const TrainConfig& config, losses::FeatureExtractor* extractor, std::mt19937_64* rng);

struct EpochRecord {
  int epoch = 0;
  losses::LossBreakdown train_loss;  // mean over steps
  double val_map_50 = 0.0;
  bool improved = false;
  double seconds = 0.0;
  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: nothing written
  bool resume = false;            // continue from run_dir/last.ckpt
  /// Replaces the validation mAP@.5 computation; used for scripted runs.
  std::function<double(int epoch, SdniaModel& model)> validator;
  std::function<void(const EpochRecord&)> on_epoch;
  bool log_steps = true;          // per-step records in run_dir/steps.jsonl
};

struct TrainResult {
  SdniaModel model{nullptr};  // best-on-validation weights
  TrainState state;
  std::vector<EpochRecord> history;
  bool early_stopped = false;
};

/// Joint training with early stopping. Writes best.ckpt, last.ckpt, history.jsonl and steps.jsonl under
/// run_dir. Divergence throws DivergenceError; last.ckpt keeps the last good epoch.
TrainResult train(const TrainConfig& config, const detector::DetectorConfig& detector_config,
                  const imagery::DatasetManifest& train_set, const imagery::DatasetManifest& val_set,
                  const TrainOptions& options = {});

}  // namespace sdnia::training
