// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "sdnia/commands.hpp"
#include "sdnia/config.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/image.hpp"
#include "sdnia/imagery.hpp"
#include "support.hpp"

using namespace sdnia;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::string& command, const json& config) {
  std::ostringstream out, err;
  const int code = commands::run(command, config, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// A small shapes dataset written through the CLI.
fs::path make_shapes(const testing::TempDir& dir, const std::string& name, std::size_t count, std::uint64_t seed) {
  const auto manifest = dir / name / "manifest.tsv";
  const auto r = run("build-dataset", {{"run_dir", (dir / ("run_" + name)).string()},
                                       {"build_dataset",
                                        {{"kind", "shapes"},
                                         {"count", count},
                                         {"size", 32},
                                         {"seed", seed},
                                         {"name", name},
                                         {"output", manifest.string()}}}});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return manifest;
}

json tiny_train() {
  return {{"image_size", 32}, {"max_epochs", 2}, {"batch_size", 4}, {"extractor", "identity"}, {"learning_rate", 0.01}};
}

json tiny_detector() { return {{"width", 8}}; }

std::vector<fs::path> write_styles(const testing::TempDir& dir) {
  const auto base = imagery::make_shapes_dataset([] {
    imagery::ShapesOptions o;
    o.count = 2;
    o.size = 32;
    o.seed = 99;
    return o;
  }());
  fs::create_directories(dir / "styles");
  std::vector<fs::path> out{dir / "styles" / "fog.png", dir / "styles" / "dark.png"};
  save_image(imagery::synthesize_fog(base.entries[0].pixels, 1.5, 0.9), out[0]);
  save_image(imagery::synthesize_gamma(base.entries[1].pixels, 3.0), out[1]);
  return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("exit code 1 for configuration errors, before any output") {
  testing::TempDir dir;
  const auto rd = (dir / "never").string();
  SUBCASE("unknown root key") {
    const auto r = run("train", {{"run_dir", rd}, {"bogus", 1}});
    CHECK(r.code == 1);
    CHECK(r.err.find("bogus") != std::string::npos);
  }
  SUBCASE("unknown command") { CHECK(run("frobnicate", json::object()).code == 1); }
  SUBCASE("not an object") { CHECK(run("train", json::array()).code == 1); }
  SUBCASE("missing training data") { CHECK(run("train", {{"run_dir", rd}}).code == 1); }
  SUBCASE("alpha out of range") {
    const auto content = make_shapes(dir, "c", 2, 1);
    const auto styles = write_styles(dir);
    const auto r = run("stylize", {{"run_dir", rd},
                                   {"stylize",
                                    {{"content", content.string()}, {"styles", styles[0].string()}, {"alphas", {0.5, 1.2}}}}});
    CHECK(r.code == 1);
    CHECK(r.err.find("1.2") != std::string::npos);
  }
  SUBCASE("bad learning rate") {
    const auto data = make_shapes(dir, "t", 4, 1);
    auto t = tiny_train();
    t["learning_rate"] = -1;
    CHECK(run("train", {{"run_dir", rd}, {"data", {{"train", data.string()}}}, {"train", t}}).code == 1);
  }
  SUBCASE("image size not a multiple of the detector stride") {
    const auto data = make_shapes(dir, "t", 4, 1);
    auto t = tiny_train();
    t["image_size"] = 48;
    const auto r = run("train", {{"run_dir", rd}, {"data", {{"train", data.string()}}}, {"train", t}});
    CHECK(r.code == 1);
    CHECK(r.err.find("multiple of 32") != std::string::npos);
  }
  SUBCASE("torchscript backend without weights") {
    const auto content = make_shapes(dir, "c", 2, 1);
    const auto styles = write_styles(dir);
    CHECK(run("stylize", {{"run_dir", rd},
                          {"stylizer", {{"backend", "torchscript"}}},
                          {"stylize", {{"content", content.string()}, {"styles", styles[0].string()}}}})
              .code == 1);
  }
  CHECK_FALSE(fs::exists(rd));
}

TEST_CASE("stylize writes every combination reproducibly") {
  testing::TempDir dir;
  const auto content = make_shapes(dir, "content", 2, 3);
  const auto styles = write_styles(dir);
  auto cfg = [&](const std::string& name) {
    return json{{"run_dir", (dir / name).string()},
                {"stylize",
                 {{"content", content.string()},
                  {"styles", {styles[0].string(), styles[1].string()}},
                  {"alphas", {0.4, 0.8, 1.0}}}}};
  };
  const auto a = run("stylize", cfg("a"));
  REQUIRE_MESSAGE(a.code == 0, a.err);
  CHECK(a.out.find("stylized 12 images") != std::string::npos);
  const auto m = imagery::load_dataset(dir / "a" / "stylized" / "manifest.tsv", imagery::LoadOptions{false});
  CHECK(m.entries.size() == 12);
  for (const auto& e : m.entries) {
    CHECK(e.origin == imagery::Origin::stylized);
    CHECK_FALSE(e.reference_id.empty());
  }
  CHECK(fs::exists(dir / "a" / "run_manifest.json"));

  REQUIRE(run("stylize", cfg("b")).code == 0);
  for (const auto& e : fs::directory_iterator(dir / "a" / "stylized" / "images")) {
    CHECK(slurp(e.path()) == slurp(dir / "b" / "stylized" / "images" / e.path().filename()));
  }
}

TEST_CASE("build-dataset kinds") {
  testing::TempDir dir;
  const auto clean = make_shapes(dir, "clean", 10, 4);
  auto build = [&](json section) {
    return run("build-dataset", {{"run_dir", (dir / "run").string()}, {"build_dataset", std::move(section)}});
  };
  SUBCASE("degrade") {
    const auto out = dir / "fog" / "manifest.tsv";
    const auto r = build({{"kind", "degrade"}, {"input", clean.string()}, {"degradation", "fog"}, {"output", out.string()}});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto m = imagery::load_dataset(out);
    CHECK(m.entries.size() == 10);
    CHECK(m.entries[0].origin == imagery::Origin::fog_synth);
    CHECK(build({{"kind", "degrade"}, {"input", clean.string()}, {"degradation", "snow"}}).code == 1);
  }
  SUBCASE("split") {
    const auto out = dir / "split" / "train.tsv";
    const auto r = build({{"kind", "split"}, {"input", clean.string()}, {"fraction", 0.2}, {"output", out.string()}});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto train = imagery::load_dataset(out, imagery::LoadOptions{false});
    const auto val = imagery::load_dataset(dir / "split" / "val_manifest.tsv", imagery::LoadOptions{false});
    CHECK(train.entries.size() + val.entries.size() == 10);
    CHECK(val.entries.size() == 2);
  }
  SUBCASE("filter") {
    const auto out = dir / "filtered" / "manifest.tsv";
    const auto r = build({{"kind", "filter"}, {"input", clean.string()}, {"classes", {"circle"}}, {"output", out.string()}});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto m = imagery::load_dataset(out, imagery::LoadOptions{false});
    CHECK(m.class_names == std::vector<std::string>{"circle"});
    for (const auto& e : m.entries)
      for (const auto& b : e.boxes) CHECK(b.class_id == 0);
  }
  SUBCASE("mix") {
    const auto styles = write_styles(dir);
    const auto s = run("stylize", {{"run_dir", (dir / "st").string()},
                                   {"stylize", {{"content", clean.string()}, {"styles", styles[0].string()}}}});
    REQUIRE(s.code == 0);
    const auto out = dir / "mixed" / "manifest.tsv";
    const auto r = build({{"kind", "mix"},
                          {"originals", clean.string()},
                          {"stylized", (dir / "st" / "stylized" / "manifest.tsv").string()},
                          {"output", out.string()}});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(imagery::load_dataset(out, imagery::LoadOptions{false}).entries.size() == 20);
  }
  SUBCASE("unknown kind") { CHECK(build({{"kind", "zip"}}).code == 1); }
}

TEST_CASE("eval from a detections file") {
  testing::TempDir dir;
  const auto test = make_shapes(dir, "test", 6, 5);
  const auto m = imagery::load_dataset(test, imagery::LoadOptions{false});
  std::vector<evaluation::ImageResult> perfect;
  for (const auto& e : m.entries) {
    evaluation::ImageResult r{e.image_id, {}, {}};
    for (const auto& b : e.boxes) r.detections.push_back(testing::make_detection(b, 1.0));
    perfect.push_back(r);
  }
  evaluation::write_detections(dir / "perfect.jsonl", perfect);
  const auto r = run("eval", {{"run_dir", (dir / "eval").string()},
                              {"eval", {{"detections", (dir / "perfect.jsonl").string()}, {"test", test.string()}}}});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("mAP@.5 = 1.0000, mAP@.5:.95 = 1.0000") != std::string::npos);
  CHECK(fs::exists(dir / "eval" / "report.json"));

  // Empty detection records score zero rather than failing.
  std::vector<evaluation::ImageResult> none;
  for (const auto& e : m.entries) none.push_back({e.image_id, {}, {}});
  evaluation::write_detections(dir / "none.jsonl", none);
  const auto z = run("eval", {{"run_dir", (dir / "eval2").string()},
                              {"eval", {{"detections", (dir / "none.jsonl").string()}, {"test", test.string()}}}});
  REQUIRE_MESSAGE(z.code == 0, z.err);
  CHECK(z.out.find("mAP@.5 = 0.0000") != std::string::npos);

  CHECK(run("eval", {{"run_dir", (dir / "eval3").string()},
                     {"eval", {{"detections", (dir / "none.jsonl").string()}, {"test", test.string()}, {"latency", true}}}})
            .code == 1);
}

TEST_CASE("train, eval and detect with a checkpoint") {
  testing::TempDir dir;
  const auto train = make_shapes(dir, "train", 8, 6);
  const auto val = make_shapes(dir, "val", 4, 7);
  const auto run_dir = dir / "train_run";
  json cfg{{"run_dir", run_dir.string()},
           {"seed", 3},
           {"data", {{"train", train.string()}, {"val", val.string()}}},
           {"train", tiny_train()},
           {"detector", tiny_detector()}};
  const auto t = run("train", cfg);
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(t.out.find("epochs run: 2") != std::string::npos);
  const auto ckpt = run_dir / "best.ckpt";
  REQUIRE(fs::exists(ckpt));

  SUBCASE("resume extends the run") {
    cfg["resume"] = true;
    cfg["train"]["max_epochs"] = 3;
    const auto r = run("train", cfg);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("epochs run: 3") != std::string::npos);
  }
  SUBCASE("overrides reach the training config") {
    auto c = cfg;
    config::apply_override(c, "train.max_epochs=1");
    config::apply_override(c, "run_dir=" + (dir / "override").string());
    const auto r = run("train", c);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("epochs run: 1") != std::string::npos);
  }
  SUBCASE("eval with two test columns and latency") {
    const auto fog = dir / "fog" / "manifest.tsv";
    REQUIRE(run("build-dataset", {{"run_dir", (dir / "b").string()},
                                  {"build_dataset", {{"kind", "degrade"}, {"input", val.string()}, {"output", fog.string()}}}})
                .code == 0);
    const auto r = run("eval", {{"run_dir", (dir / "eval").string()},
                                {"eval",
                                 {{"checkpoint", ckpt.string()},
                                  {"test", {val.string(), fog.string()}},
                                  {"latency", true},
                                  {"latency_runs", 2},
                                  {"latency_sizes", {32, 64}}}}});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("val: mAP@.5 = ") != std::string::npos);
    CHECK(r.out.find("_fog: mAP@.5 = ") != std::string::npos);
    CHECK(r.out.find("latency 32x32") != std::string::npos);
    CHECK(r.out.find("latency 64x64") != std::string::npos);
    CHECK(r.out.find("NIA overhead") != std::string::npos);
  }
  SUBCASE("class mismatch") {
    const auto other = dir / "other" / "manifest.tsv";
    REQUIRE(run("build-dataset", {{"run_dir", (dir / "b").string()},
                                  {"build_dataset",
                                   {{"kind", "filter"}, {"input", val.string()}, {"classes", {"square"}}, {"output", other.string()}}}})
                .code == 0);
    const auto r = run("eval", {{"run_dir", (dir / "eval").string()},
                                {"eval", {{"checkpoint", ckpt.string()}, {"test", other.string()}}}});
    CHECK(r.code == 1);
    CHECK(r.err.find("class universe mismatch") != std::string::npos);
  }
  SUBCASE("detect writes outputs and flags unreadable images") {
    const auto img = dir / "in" / "a.png";
    fs::create_directories(img.parent_path());
    save_image(imagery::load_dataset(val).entries[0].pixels, img);
    std::ofstream(dir / "in" / "broken.png") << "not an image";
    const auto r = run("detect", {{"run_dir", (dir / "det").string()},
                                  {"detect", {{"checkpoint", ckpt.string()}, {"images", (dir / "in").string()}}}});
    CHECK(r.code == 3);
    CHECK(fs::exists(dir / "det" / "detect" / "a_adapted.png"));
    CHECK(fs::exists(dir / "det" / "detect" / "a_overlay.png"));
    CHECK(load_image(dir / "det" / "detect" / "a_adapted.png").sizes() == load_image(img).sizes());
    const auto records = evaluation::read_detections(dir / "det" / "detections.jsonl");
    REQUIRE(records.size() == 1);
    CHECK(records[0].image_id == "a");

    fs::remove(dir / "in" / "broken.png");
    CHECK(run("detect", {{"run_dir", (dir / "det2").string()},
                         {"detect", {{"checkpoint", ckpt.string()}, {"images", img.string()}, {"conf_threshold", 1.0}}}})
              .code == 0);
    CHECK(evaluation::read_detections(dir / "det2" / "detections.jsonl")[0].detections.empty());
  }
}

TEST_CASE("ablation grids produce one row per variant") {
  testing::TempDir dir;
  const auto originals = make_shapes(dir, "orig", 8, 8);
  const auto test = make_shapes(dir, "test", 4, 9);
  const auto styles = write_styles(dir);
  auto t = tiny_train();
  t["max_epochs"] = 1;
  auto cfg = [&](const std::string& grid, const fs::path& rd) {
    return json{{"run_dir", rd.string()},
                {"train", t},
                {"detector", tiny_detector()},
                {"ablate",
                 {{"grid", grid},
                  {"originals", originals.string()},
                  {"styles", {styles[0].string(), styles[1].string()}},
                  {"test", test.string()}}}};
  };
  SUBCASE("table6 and resume") {
    const auto rd = dir / "t6";
    const auto r = run("ablate", cfg("table6", rd));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    std::ifstream in(rd / "ablation_table6.json");
    const auto j = json::parse(in);
    CHECK(j.at("rows").size() == 4);
    CHECK(j.at("cells").size() == 4);

    // A finished row is read back instead of retrained.
    const auto row_file = rd / "cells" / "baseline" / "result.json";
    REQUIRE(fs::exists(row_file));
    json row;
    std::ifstream(row_file) >> row;
    row["test"]["map_50"] = 0.777;
    std::ofstream(row_file) << row.dump();
    auto again = cfg("table6", rd);
    again["resume"] = true;
    REQUIRE(run("ablate", again).code == 0);
    std::ifstream in2(rd / "ablation_table6.json");
    const auto j2 = json::parse(in2);
    CHECK(j2.at("cells")[0].at("results").at("test").at("map_50").get<double>() == 0.777);
  }
  SUBCASE("table7") {
    const auto rd = dir / "t7";
    const auto r = run("ablate", cfg("table7", rd));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    std::ifstream in(rd / "ablation_table7.json");
    CHECK(json::parse(in).at("rows").size() == 5);
  }
  SUBCASE("styles required") {
    auto c = cfg("table6", dir / "t6b");
    c["ablate"].erase("styles");
    CHECK(run("ablate", c).code == 1);
  }
}

}  // TEST_SUITE
