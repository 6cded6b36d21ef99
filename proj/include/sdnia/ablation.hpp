// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdnia/detector.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/losses.hpp"
#include "sdnia/stylizer.hpp"
#include "sdnia/training.hpp"

namespace sdnia::ablation {

/// One row of an ablation table: a training configuration delta.
struct Variant {
  std::string name;
  bool use_stylized_data = true;
  bool use_nia = true;
  std::vector<double> alphas{1.0};                 // stylization strengths for the training data
  std::optional<losses::LossWeights> weights;      // overrides the base loss weights

  nlohmann::json to_json() const;
};

struct Grid {
  std::string name;
  std::vector<Variant> variants;
};

/// Restoration loss variants: M+l1, VGG_P, M+l1+VGG_P.
Grid table5_grid();
/// baseline, SD-only, NIA-only, SDNIA.
Grid table6_grid();
/// SDNIA with alpha ranges [1.0], [0.8:1.0], [0.6:1.0], [0.4:1.0], [0.2:1.0] in steps of 0.2.
Grid table7_grid();
/// table5 | table6 | table7. Throws ConfigError otherwise.
Grid grid_by_name(const std::string& name);

struct TestSet {
  std::string name;
  imagery::DatasetManifest data;
};

struct AblationContext {
  training::TrainConfig base;
  detector::DetectorConfig detector;
  imagery::DatasetManifest originals;           // clean training pool
  std::vector<stylizer::StyleImage> styles;
  const stylizer::StylizerBackend* backend = nullptr;
  std::vector<TestSet> test_sets;
  std::filesystem::path work_dir;               // per-variant results; empty keeps everything in memory
  bool resume = false;                          // reuse finished rows found in work_dir
};

struct Cell {
  bool ok = false;
  double map_50 = 0.0;
  double map_50_95 = 0.0;
  std::string error;
};

struct AblationReport {
  std::string grid;
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> cells;  // [row][column]
  std::vector<bool> resumed;             // per row

  std::size_t failed_cells() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Trains each variant with the shared seed and evaluates it on every test set. A failing row is
/// recorded and the grid continues.
AblationReport run_ablation(const Grid& grid, const AblationContext& context);

/// Alpha list lo, lo + step, ..., 1.0 built from integer steps (k / 5 for step 0.2).
std::vector<double> alpha_range(double lo, double step = 0.2);

}  // namespace sdnia::ablation
