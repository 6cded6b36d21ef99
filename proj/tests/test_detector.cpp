// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "sdnia/detector.hpp"
#include "sdnia/errors.hpp"
#include "support.hpp"

using namespace sdnia;
using namespace sdnia::detector;
using testing::make_detection;

TEST_SUITE("detector") {

TEST_CASE("raw grid shapes") {
  torch::manual_seed(0);
  torch::NoGradGuard guard;
  SUBCASE("544 input, 5 classes") {
    TinyYolo net(DetectorConfig::defaults(5));
    net->eval();
    const auto raw = net->forward(torch::rand({1, 3, 544, 544}));
    REQUIRE(raw.size() == 2);
    CHECK(raw[1].sizes() == torch::IntArrayRef{1, 17, 17, 3, 10});
    CHECK(raw[0].sizes() == torch::IntArrayRef{1, 34, 34, 3, 10});
  }
  SUBCASE("64 input at scale 32") {
    TinyYolo net(DetectorConfig::defaults(3));
    const auto raw = net->forward(torch::rand({2, 3, 64, 64}));
    CHECK(raw[1].size(1) == 2);
    CHECK(raw[1].size(2) == 2);
  }
  SUBCASE("three scales") {
    TinyYolo net(DetectorConfig::defaults(2, {8, 16, 32}));
    const auto raw = net->forward(torch::rand({1, 3, 64, 96}));
    REQUIRE(raw.size() == 3);
    CHECK(raw[0].sizes() == torch::IntArrayRef{1, 8, 12, 3, 7});
    CHECK(raw[2].sizes() == torch::IntArrayRef{1, 2, 3, 3, 7});
  }
}

TEST_CASE("indivisible input names the required multiple") {
  TinyYolo net(DetectorConfig::defaults(1));
  try {
    net->forward(torch::rand({1, 3, 50, 64}));
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("multiple of 32") != std::string::npos);
  }
}

TEST_CASE("identical images give identical outputs") {
  TinyYolo net(DetectorConfig::defaults(2));
  net->eval();
  torch::NoGradGuard guard;
  const auto img = torch::rand({1, 3, 64, 64});
  const auto raw = net->forward(torch::cat({img, img}));
  for (const auto& r : raw) CHECK(torch::equal(r[0], r[1]));
}

TEST_CASE("config validation and JSON round trip") {
  auto c = DetectorConfig::defaults(4);
  c.validate();
  CHECK(DetectorConfig::from_json(c.to_json()) == c);
  auto bad = c;
  bad.grid_scales = {32, 16};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.num_classes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.anchors.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

namespace {

std::vector<torch::Tensor> blank_raw(const DetectorConfig& c, int64_t size, double fill) {
  std::vector<torch::Tensor> raw;
  for (const auto& g : grid_layout(c, size, size)) {
    raw.push_back(torch::full({1, g.rows, g.cols, static_cast<int64_t>(g.anchors.size()), 5 + c.num_classes}, fill,
                              torch::kFloat64));
  }
  return raw;
}

}  // namespace

TEST_CASE("decode: saturated negative logits give nothing") {
  const auto c = DetectorConfig::defaults(2);
  const auto dets = decode_predictions(blank_raw(c, 64, -1e4), c, 1e-9);
  CHECK(dets[0].empty());
}

TEST_CASE("decode: one confident cell with zero offsets") {
  const auto c = DetectorConfig::defaults(2);
  auto raw = blank_raw(c, 64, -1e4);
  // Scale 32 grid is 2x2; cell (row 1, col 0), anchor 1.
  auto slot = raw[1][0][1][0][1];
  slot.slice(0, 0, 4).fill_(0.0);
  slot[4] = 30.0;
  slot[6] = 30.0;
  const auto dets = decode_predictions(raw, c, 0.5);
  REQUIRE(dets[0].size() == 1);
  const auto& d = dets[0][0];
  const auto& anchor = c.anchors[1][1];
  CHECK(d.class_id == 1);
  CHECK(d.box.cx == doctest::Approx(0.25));
  CHECK(d.box.cy == doctest::Approx(0.75));
  CHECK(d.box.w == doctest::Approx(anchor.w));
  CHECK(d.box.h == doctest::Approx(anchor.h));
  CHECK(d.confidence == doctest::Approx(1.0));
}

TEST_CASE("decode: zero threshold emits every slot, clipped to the image") {
  const auto c = DetectorConfig::defaults(2);
  auto raw = blank_raw(c, 64, 0.0);
  raw[1].select(4, 2).fill_(3.0);  // widths far beyond the image
  const auto dets = decode_predictions(raw, c, 0.0);
  const std::size_t slots = 4 * 4 * 3 + 2 * 2 * 3;
  CHECK(dets[0].size() == slots);
  for (const auto& d : dets[0]) {
    CHECK(d.box.x1() >= 0.0);
    CHECK(d.box.x2() <= 1.0 + 1e-12);
    CHECK(d.box.y1() >= 0.0);
    CHECK(d.box.y2() <= 1.0 + 1e-12);
  }
}

TEST_CASE("encode/decode round trip for best-anchor assignments") {
  const auto c = DetectorConfig::defaults(3);
  const auto grids = grid_layout(c, 64, 64);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0.05, 0.95), ext(0.05, 0.6);
  for (int i = 0; i < 200; ++i) {
    BoundingBox box{i % 3, pos(rng), pos(rng), ext(rng), ext(rng)};
    std::size_t bs = 0, ba = 0;
    double best = -1;
    for (std::size_t s = 0; s < grids.size(); ++s)
      for (std::size_t a = 0; a < grids[s].anchors.size(); ++a) {
        const double v = shape_iou(box.w, box.h, grids[s].anchors[a].w, grids[s].anchors[a].h);
        if (v > best) best = v, bs = s, ba = a;
      }
    const auto code = encode_box(box, grids[bs], grids[bs].anchors[ba]);
    const auto back = decode_box(code, grids[bs], grids[bs].anchors[ba], box.class_id);
    CHECK(std::abs(back.cx - box.cx) < 1e-6);
    CHECK(std::abs(back.cy - box.cy) < 1e-6);
    CHECK(std::abs(back.w - box.w) < 1e-6);
    CHECK(std::abs(back.h - box.h) < 1e-6);

    const auto targets = build_targets({{box}}, c, 64, 64);
    CHECK(targets[bs].positive[0][code.row][code.col][static_cast<int64_t>(ba)].item<bool>());
    int64_t total = 0;
    for (const auto& t : targets) total += t.positive.sum().item<int64_t>();
    CHECK(total == 1);
  }
}

TEST_CASE("nms examples") {
  const BoundingBox a{0, 0.25, 0.25, 0.5, 0.5};
  SUBCASE("single detection") {
    const auto out = nms({make_detection(a, 0.7)}, 0.45);
    REQUIRE(out.size() == 1);
    CHECK(out[0].confidence == 0.7);
  }
  SUBCASE("identical boxes keep the higher confidence") {
    const auto out = nms({make_detection(a, 0.8), make_detection(a, 0.9)}, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].confidence == 0.9);
  }
  SUBCASE("IoU 1/7 survives at 0.5") {
    const auto b = BoundingBox::from_corners(0, 0.25, 0.25, 0.75, 0.75);
    REQUIRE(testing::raster_iou(a, b, 0.0, 1.0, 800) == doctest::Approx(1.0 / 7.0).epsilon(1e-3));
    CHECK(nms({make_detection(a, 0.9), make_detection(b, 0.8)}, 0.5).size() == 2);
  }
  SUBCASE("different classes never suppress each other") {
    BoundingBox other = a;
    other.class_id = 1;
    CHECK(nms({make_detection(a, 0.9), make_detection(other, 0.8)}, 0.1).size() == 2);
  }
}

TEST_CASE("nms properties on random input") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> conf(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> in;
    for (int i = 0; i < 20; ++i) in.push_back(make_detection(testing::random_box(rng, i % 2), conf(rng)));
    const double thr = 0.3 + 0.05 * (trial % 8);
    const auto out = nms(in, thr);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const bool present = std::any_of(in.begin(), in.end(), [&](const Detection& d) {
        return d.box == out[i].box && d.confidence == out[i].confidence;
      });
      CHECK(present);
      if (i > 0) CHECK(out[i - 1].confidence >= out[i].confidence);
      for (std::size_t j = i + 1; j < out.size(); ++j) {
        if (out[i].class_id == out[j].class_id) CHECK(testing::plain_iou(out[i].box, out[j].box) <= thr + 1e-12);
      }
    }
  }
}

}  // TEST_SUITE
