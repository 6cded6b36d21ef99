// SPDX-License-Identifier: Apache-2.0
// sdnia command-line tool.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdnia/commands.hpp"
#include "sdnia/config.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/log.hpp"

namespace {

nlohmann::json string_list(const std::vector<std::string>& items) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : items) j.push_back(s);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stylization-augmented training and image-adaptive detection pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "sdnia 0.1.0");

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  bool verbose = false, quiet = false;
  app.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value: key.path=value (repeatable)")->allow_extra_args(false);
  app.add_option("--seed", seed, "Global seed");
  app.add_option("--run-dir", run_dir, "Output directory");
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  auto* stylize = app.add_subcommand("stylize", "Stylize a content manifest with every style and alpha");
  std::string content;
  std::vector<std::string> styles;
  std::vector<double> alphas;
  std::string stylize_out;
  stylize->add_option("--content", content, "Content manifest");
  stylize->add_option("--styles", styles, "Style images or directories");
  stylize->add_option("--alphas", alphas, "Stylization strengths in [0, 1]");
  stylize->add_option("--output", stylize_out, "Output manifest path");

  auto* build = app.add_subcommand("build-dataset", "Generate, mix, degrade, filter or split datasets");
  std::string kind, build_out, build_input;
  build->add_option("--kind", kind, "shapes | mix | degrade | filter | split");
  build->add_option("--output", build_out, "Output manifest path");
  build->add_option("--input", build_input, "Input manifest (degrade, filter, split)");

  auto* train = app.add_subcommand("train", "Train a model");
  std::string variant, train_data, val_data;
  bool train_resume = false;
  train->add_option("--variant", variant, "baseline | sd | nia | sdnia")
      ->check(CLI::IsMember({"baseline", "sd", "nia", "sdnia"}));
  train->add_option("--train", train_data, "Training manifest");
  train->add_option("--val", val_data, "Validation manifest (default: split from --train)");
  train->add_flag("--resume", train_resume, "Continue from the run directory's last checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a detections file");
  std::string eval_ckpt, eval_dets;
  std::vector<std::string> eval_tests;
  bool eval_latency = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file");
  eval->add_option("--detections", eval_dets, "Detections JSONL instead of a checkpoint");
  eval->add_option("--test", eval_tests, "Test manifests; one report column each");
  eval->add_flag("--latency", eval_latency, "Add the timing section");

  auto* detect = app.add_subcommand("detect", "Adapt and detect on images");
  std::string detect_ckpt;
  std::vector<std::string> detect_images;
  detect->add_option("--checkpoint", detect_ckpt, "Checkpoint file");
  detect->add_option("images", detect_images, "Image files or directories");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  std::string grid;
  bool ablate_resume = false;
  ablate->add_option("--grid", grid, "table5 | table6 | table7")->check(CLI::IsMember({"table5", "table6", "table7"}));
  ablate->add_flag("--resume", ablate_resume, "Skip rows already finished in the run directory");

  CLI11_PARSE(app, argc, argv);

  sdnia::log::set_level(verbose ? sdnia::log::Level::debug : quiet ? sdnia::log::Level::warn : sdnia::log::Level::info);

  nlohmann::json cfg = nlohmann::json::object();
  try {
    if (!config_path.empty()) cfg = sdnia::config::load_file(config_path);
    auto set = [&](const std::string& key, const nlohmann::json& value) {
      sdnia::config::apply_override(cfg, key + "=" + value.dump());
    };
    if (seed) set("seed", *seed);
    if (!run_dir.empty()) set("run_dir", run_dir);
    if (!content.empty()) set("stylize.content", content);
    if (!styles.empty()) set("stylize.styles", string_list(styles));
    if (!alphas.empty()) set("stylize.alphas", alphas);
    if (!stylize_out.empty()) set("stylize.output", stylize_out);
    if (!kind.empty()) set("build_dataset.kind", kind);
    if (!build_out.empty()) set("build_dataset.output", build_out);
    if (!build_input.empty()) set("build_dataset.input", build_input);
    if (!variant.empty()) set("train.variant", variant);
    if (!train_data.empty()) set("data.train", train_data);
    if (!val_data.empty()) set("data.val", val_data);
    if (train_resume || ablate_resume) set("resume", true);
    if (!eval_ckpt.empty()) set("eval.checkpoint", eval_ckpt);
    if (!eval_dets.empty()) set("eval.detections", eval_dets);
    if (!eval_tests.empty()) set("eval.test", string_list(eval_tests));
    if (eval_latency) set("eval.latency", true);
    if (!detect_ckpt.empty()) set("detect.checkpoint", detect_ckpt);
    if (!detect_images.empty()) set("detect.images", string_list(detect_images));
    if (!grid.empty()) set("ablate.grid", grid);
    for (const auto& o : overrides) sdnia::config::apply_override(cfg, o);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sdnia::commands::kValidation;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  return sdnia::commands::run(command, cfg, std::cout, std::cerr);
}
