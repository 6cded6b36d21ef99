// SPDX-License-Identifier: Apache-2.0
#include "sdnia/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "sdnia/errors.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/log.hpp"

namespace sdnia::ablation {

nlohmann::json Variant::to_json() const {
  nlohmann::json j = {{"name", name}, {"use_stylized_data", use_stylized_data}, {"use_nia", use_nia}, {"alphas", alphas}};
  if (weights) j["loss_weights"] = weights->to_json();
  return j;
}

std::vector<double> alpha_range(double lo, double step) {
  if (!(step > 0.0) || lo < 0.0 || lo > 1.0) throw ArgumentError("alpha_range: bad bounds");
  const auto steps = static_cast<int>(std::llround(1.0 / step));
  const auto first = static_cast<int>(std::llround(lo / step));
  std::vector<double> out;
  for (int k = first; k <= steps; ++k) out.push_back(static_cast<double>(k) / steps);
  return out;
}

Grid table5_grid() {
  Grid g{"table5", {}};
  losses::LossWeights ml1;
  ml1.gamma_res = 0.0;
  losses::LossWeights vgg;
  vgg.alpha_res = 0.0;
  vgg.beta_res = 0.0;
  g.variants.push_back({"M+l1", true, true, {1.0}, ml1});
  g.variants.push_back({"VGG_P", true, true, {1.0}, vgg});
  g.variants.push_back({"M+l1+VGG_P", true, true, {1.0}, losses::LossWeights{}});
  return g;
}

Grid table6_grid() {
  Grid g{"table6", {}};
  g.variants.push_back({"baseline", false, false, {1.0}, std::nullopt});
  g.variants.push_back({"SD-only", true, false, {1.0}, std::nullopt});
  g.variants.push_back({"NIA-only", false, true, {1.0}, std::nullopt});
  g.variants.push_back({"SDNIA", true, true, {1.0}, std::nullopt});
  return g;
}

Grid table7_grid() {
  Grid g{"table7", {}};
  for (int k = 5; k >= 1; --k) {
    const double lo = k / 5.0;
    char name[32];
    if (k == 5) {
      std::snprintf(name, sizeof(name), "[1.0]");
    } else {
      std::snprintf(name, sizeof(name), "[%.1f:1.0]", lo);
    }
    g.variants.push_back({name, true, true, alpha_range(lo), std::nullopt});
  }
  return g;
}

Grid grid_by_name(const std::string& name) {
  if (name == "table5") return table5_grid();
  if (name == "table6") return table6_grid();
  if (name == "table7") return table7_grid();
  throw ConfigError("unknown ablation grid '" + name + "' (expected table5, table6 or table7)");
}

std::size_t AblationReport::failed_cells() const {
  std::size_t n = 0;
  for (const auto& row : cells) {
    for (const auto& c : row) n += c.ok ? 0 : 1;
  }
  return n;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json j = {{"grid", grid}, {"rows", rows}, {"columns", columns}, {"cells", nlohmann::json::array()}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& cell = cells[r][c];
      row[columns[c]] = cell.ok ? nlohmann::json{{"map_50", cell.map_50}, {"map_50_95", cell.map_50_95}}
                                : nlohmann::json{{"error", cell.error}};
    }
    j["cells"].push_back({{"variant", rows[r]}, {"results", row}});
  }
  return j;
}

std::string AblationReport::to_text() const {
  return evaluation::render_table(rows, columns,
                                  [&](std::size_t r, std::size_t c) -> std::optional<std::pair<double, double>> {
                                    const auto& cell = cells[r][c];
                                    if (!cell.ok) return std::nullopt;
                                    return std::make_pair(cell.map_50, cell.map_50_95);
                                  });
}

namespace {

std::string alpha_key(const std::vector<double>& alphas) {
  std::string key;
  for (double a : alphas) key += std::to_string(std::llround(a * 100)) + ",";
  return key;
}

std::string safe_name(const std::string& name) {
  std::string out;
  for (char ch : name) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out;
}

}  // namespace

AblationReport run_ablation(const Grid& grid, const AblationContext& context) {
  AblationReport report;
  report.grid = grid.name;
  for (const auto& t : context.test_sets) report.columns.push_back(t.name);
  if (grid.variants.empty()) return report;
  if (context.test_sets.empty()) throw ArgumentError("run_ablation: no test sets");

  std::map<std::string, imagery::DatasetManifest> stylized_cache;
  for (const auto& variant : grid.variants) {
    report.rows.push_back(variant.name);
    std::vector<Cell> row(context.test_sets.size());
    const auto row_dir = context.work_dir.empty() ? std::filesystem::path() : context.work_dir / safe_name(variant.name);
    const auto result_path = row_dir / "result.json";

    if (context.resume && !row_dir.empty() && std::filesystem::exists(result_path)) {
      std::ifstream in(result_path);
      const auto j = nlohmann::json::parse(in);
      bool complete = true;
      for (std::size_t c = 0; c < context.test_sets.size(); ++c) {
        const auto& name = context.test_sets[c].name;
        if (!j.contains(name) || !j.at(name).value("ok", false)) {
          complete = false;
          break;
        }
        row[c] = {true, j.at(name).at("map_50").get<double>(), j.at(name).at("map_50_95").get<double>(), ""};
      }
      if (complete) {
        log::info("ablation: reusing finished row '", variant.name, "'");
        report.cells.push_back(row);
        report.resumed.push_back(true);
        continue;
      }
      row.assign(context.test_sets.size(), Cell{});
    }

    try {
      auto config = context.base;
      config.use_stylized_data = variant.use_stylized_data;
      config.use_nia = variant.use_nia;
      if (variant.weights) config.loss_weights = *variant.weights;

      imagery::DatasetManifest training = context.originals;
      if (variant.use_stylized_data) {
        if (context.backend == nullptr) throw ConfigError("ablation: stylized variants need a stylizer backend");
        const auto key = alpha_key(variant.alphas);
        auto it = stylized_cache.find(key);
        if (it == stylized_cache.end()) {
          const auto result = stylizer::batch_stylize(*context.backend, context.originals, context.styles, variant.alphas);
          if (result.failures > 0) log::warn("ablation: ", result.failures, " stylization failures for ", variant.name);
          it = stylized_cache.emplace(key, result.manifest).first;
        }
        training = imagery::mix_datasets(context.originals, it->second);
      }
      const auto [train_set, val_set] = imagery::split_validation(training, config.val_fraction, config.seed);
      training::TrainOptions opts;
      opts.run_dir = row_dir;
      const auto trained = training::train(config, context.detector, train_set, val_set, opts);
      auto model = trained.model;

      nlohmann::json saved = nlohmann::json::object();
      for (std::size_t c = 0; c < context.test_sets.size(); ++c) {
        const auto& ts = context.test_sets[c];
        try {
          const auto r = evaluation::evaluate_model(model, ts.data, config.image_size, config.eval_conf_threshold);
          row[c] = {true, std::isnan(r.map_50) ? 0.0 : r.map_50, std::isnan(r.map_50_95) ? 0.0 : r.map_50_95, ""};
          saved[ts.name] = {{"ok", true}, {"map_50", row[c].map_50}, {"map_50_95", row[c].map_50_95}};
        } catch (const std::exception& e) {
          row[c] = {false, 0.0, 0.0, e.what()};
          saved[ts.name] = {{"ok", false}, {"error", e.what()}};
        }
      }
      if (!row_dir.empty()) {
        std::filesystem::create_directories(row_dir);
        std::ofstream(result_path) << saved.dump(2) << "\n";
      }
    } catch (const std::exception& e) {
      log::error("ablation: variant '", variant.name, "' failed: ", e.what());
      for (auto& cell : row) cell = {false, 0.0, 0.0, e.what()};
    }
    report.cells.push_back(row);
    report.resumed.push_back(false);
  }
  return report;
}

}  // namespace sdnia::ablation
