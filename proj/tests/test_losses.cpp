// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "sdnia/detector.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/losses.hpp"
#include "support.hpp"

using namespace sdnia;
using namespace sdnia::losses;

namespace {

torch::Tensor constant(double v, int64_t size = 32) {
  return torch::full({1, 3, size, size}, v, torch::kFloat64);
}

double scalar(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("weights and JSON") {
  const LossWeights w;
  CHECK(w.alpha_res == 0.25);
  CHECK(w.beta_res == 0.25);
  CHECK(w.gamma_res == 0.5);
  CHECK(w.p1 == 0.05);
  CHECK(w.p2 == 1.0);
  CHECK(w.p3 == 0.5);
  CHECK(w.p4 == 0.01);
  CHECK(LossWeights::from_json(w.to_json()) == w);
  auto bad = w;
  bad.p2 = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("weighted sums") {
  const LossWeights w;
  CHECK(std::abs(restoration_sum(w, 0.4, 0.2, 0.05, 0.05) - 0.20) < 1e-12);
  CHECK(std::abs(detection_sum(w, 1.0, 1.0, 1.0) - 1.55) < 1e-12);
  CHECK(std::abs(total_sum(w, 1.0, 1.0, 1.0, 1.0) - 1.56) < 1e-12);
  const double l_res = restoration_sum(w, 1.0, 1.0, 1.0, 1.0);
  CHECK(std::abs(l_res - 1.5) < 1e-12);
  CHECK(std::abs(total_sum(w, 1.0, 1.0, 1.0, l_res) - 1.565) < 1e-12);

  LossBreakdown det, res;
  det.l_box = det.l_obj = det.l_cls = 1.0;
  res.l_l1 = res.l_msssim = res.l_vgg_content = res.l_vgg_style = 1.0;
  finalize(res, w);
  CHECK(std::abs(res.l_res - 1.5) < 1e-12);
  CHECK(std::abs(total_loss(det, res, w) - 1.565) < 1e-12);

  auto no_res = w;
  no_res.p4 = 0.0;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 20; ++i) {
    const double b = u(rng), o = u(rng), c = u(rng), r = u(rng);
    CHECK(total_sum(no_res, b, o, c, r) == detection_sum(no_res, b, o, c));
  }
}

TEST_CASE("l1") {
  const auto x = torch::rand({1, 3, 8, 8}, torch::kFloat64);
  CHECK(scalar(losses::l1_loss(x, x)) == 0.0);
  CHECK(scalar(losses::l1_loss(constant(0.0), constant(1.0))) == 1.0);
  CHECK(scalar(losses::l1_loss(constant(0.2), constant(0.5))) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(losses::l1_loss(constant(0.0, 8), constant(0.0, 16)), ArgumentError);
}

TEST_CASE("ms_ssim identity, symmetry and bounds") {
  torch::manual_seed(3);
  for (int64_t size : {24, 32, 64, 176}) {
    const auto a = torch::rand({2, 3, size, size}, torch::kFloat64);
    const auto b = torch::rand({2, 3, size, size}, torch::kFloat64);
    CHECK(scalar(ms_ssim(a, a)) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(scalar(ms_ssim(a, b)) - scalar(ms_ssim(b, a))) < 1e-12);
    CHECK(scalar(ms_ssim(a, b)) < 1.0);
  }
}

TEST_CASE("ms_ssim of black against white") {
  // Constant images: every contrast-structure term is C2 / C2 = 1 and the luminance term is
  // C1 / (1 + C1), raised to the normalized weight of the coarsest level in use.
  const double c1 = 1e-4;
  const auto& w = ms_ssim_weights();
  auto closed_form = [&](int levels) {
    double total = 0.0;
    for (int l = 0; l < levels; ++l) total += w[l];
    return std::pow(c1 / (1.0 + c1), w[levels - 1] / total);
  };
  CHECK(ms_ssim_levels_for(32, 11) == 2);
  CHECK(ms_ssim_levels_for(176, 11) == 5);
  const double v32 = scalar(ms_ssim(constant(0.0, 32), constant(1.0, 32)));
  CHECK(v32 < 0.01);
  CHECK(v32 == doctest::Approx(closed_form(2)).epsilon(1e-9));
  CHECK(scalar(ms_ssim(constant(0.0, 64), constant(1.0, 64))) == doctest::Approx(closed_form(3)).epsilon(1e-9));
  CHECK(scalar(ms_ssim(constant(0.0, 176), constant(1.0, 176))) == doctest::Approx(closed_form(5)).epsilon(1e-9));
}

TEST_CASE("ms_ssim agrees with a loop-based evaluation") {
  torch::manual_seed(4);
  for (int64_t size : {24, 48}) {
    const auto a = torch::rand({3, size, size}, torch::kFloat64);
    const auto b = (a + 0.2 * torch::rand({3, size, size}, torch::kFloat64)).clamp(0.0, 1.0);
    const int levels = ms_ssim_levels_for(size, 11);
    const double expected = testing::oracle_ms_ssim(testing::luma_rows(a), testing::luma_rows(b), levels, ms_ssim_weights());
    CHECK(scalar(ms_ssim(a, b)) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("ms_ssim size errors state the minimum") {
  MsSsimOptions strict;
  strict.auto_reduce = false;
  try {
    ms_ssim(constant(0.5, 32), constant(0.5, 32), strict);
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("176x176") != std::string::npos);
  }
  CHECK_THROWS_AS(ms_ssim(constant(0.5, 8), constant(0.5, 8)), ArgumentError);
  CHECK_THROWS_AS(ms_ssim(constant(0.5, 32), constant(0.5, 64)), ArgumentError);
}

TEST_CASE("gram matrix") {
  CHECK(gram_matrix(torch::zeros({4, 3, 3})).abs().sum().item<double>() == 0.0);
  const auto g = gram_matrix(torch::full({1, 2, 2}, 2.0, torch::kFloat64));
  CHECK(g.sizes() == torch::IntArrayRef{1, 1});
  CHECK(g.item<double>() == 4.0);

  const auto f = torch::randn({3, 4, 5}, torch::kFloat64);
  const auto fg = gram_matrix(f);
  auto acc = f.accessor<double, 3>();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) s += acc[i][y][x] * acc[j][y][x];
      CHECK(fg[i][j].item<double>() == doctest::Approx(s / 60.0).epsilon(1e-12));
    }
}

TEST_CASE("perceptual terms") {
  IdentityExtractor id;
  const auto x = torch::rand({1, 3, 16, 16}, torch::kFloat64);
  const auto same = vgg_perceptual(x, x, &id);
  CHECK(scalar(same.content) == 0.0);
  CHECK(scalar(same.style) == 0.0);
  CHECK(scalar(vgg_perceptual(constant(0.0, 16), constant(1.0, 16), &id).content) == 1.0);

  const auto none = vgg_perceptual(constant(0.0, 16), constant(1.0, 16), nullptr);
  CHECK(scalar(none.content) == 0.0);
  CHECK(scalar(none.style) == 0.0);

  auto vgg = Vgg16Extractor::random(7);
  const auto v = vgg_perceptual(torch::rand({1, 3, 32, 32}), torch::rand({1, 3, 32, 32}), vgg.get());
  CHECK(scalar(v.content) > 0.0);
  CHECK(scalar(v.style) > 0.0);
  const auto feats = vgg->extract(torch::rand({1, 3, 32, 32}));
  CHECK(feats.at("relu1_2").size(1) == 64);
  CHECK(feats.at("relu4_3").size(1) == 512);
  CHECK(feats.at("relu3_3").size(2) == 8);
}

TEST_CASE("extractor factory") {
  CHECK(make_extractor({"none", {}, true, 0}) == nullptr);
  CHECK(make_extractor({"identity", {}, true, 0})->name() == "identity");
  CHECK(make_extractor({"vgg16", {}, true, 0}) == nullptr);
  CHECK_THROWS_AS(make_extractor({"vgg16", {}, false, 0}), ConfigError);
  CHECK(make_extractor({"vgg16_random", {}, true, 0})->name() == "vgg16");
}

TEST_CASE("restoration loss") {
  IdentityExtractor id;
  const LossWeights w;
  const auto x = torch::rand({2, 3, 32, 32}, torch::kFloat64);
  const auto zero = restoration_loss(x, x, w, &id);
  CHECK(scalar(zero.total) == doctest::Approx(0.0).epsilon(1e-9));
  const auto y = torch::rand({2, 3, 32, 32}, torch::kFloat64);
  const auto t = restoration_loss(x, y, w, &id);
  CHECK(scalar(t.total) == doctest::Approx(0.25 * scalar(t.l1) + 0.25 * scalar(t.msssim_loss) +
                                           0.5 * (scalar(t.content) + scalar(t.style))).epsilon(1e-12));
  CHECK(scalar(t.total) > 0.0);
  auto only_l1 = w;
  only_l1.beta_res = only_l1.gamma_res = 0.0;
  const auto t1 = restoration_loss(x, y, only_l1, &id);
  CHECK(scalar(t1.msssim_loss) == 0.0);
  CHECK(scalar(t1.total) == doctest::Approx(0.25 * scalar(t.l1)).epsilon(1e-12));
}

TEST_CASE("ciou") {
  const auto a = torch::tensor({{0.5, 0.5, 0.2, 0.3}}, torch::kFloat64);
  CHECK(scalar(ciou(a, a)[0]) == doctest::Approx(1.0).epsilon(1e-6));
  const auto far = torch::tensor({{0.1, 0.1, 0.1, 0.1}}, torch::kFloat64);
  CHECK(scalar(ciou(a, far)[0]) < 0.0);
  const auto same_center = torch::tensor({{0.5, 0.5, 0.1, 0.15}}, torch::kFloat64);
  // Same center and aspect ratio: CIoU reduces to IoU = 0.25.
  CHECK(scalar(ciou(a, same_center)[0]) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("detection loss at the targets and with no targets") {
  const auto cfg = detector::DetectorConfig::defaults(3);
  const LossWeights w;
  const std::vector<std::vector<imagery::BoundingBox>> boxes{{{1, 0.3, 0.6, 0.25, 0.3}}, {{0, 0.7, 0.2, 0.5, 0.4}, {2, 0.2, 0.2, 0.1, 0.2}}};
  const auto targets = detector::build_targets(boxes, cfg, 64, 64, torch::kFloat64);
  const auto grids = detector::grid_layout(cfg, 64, 64);

  std::vector<torch::Tensor> raw;
  for (std::size_t s = 0; s < grids.size(); ++s) {
    auto r = torch::full({2, grids[s].rows, grids[s].cols, 3, 8}, -40.0, torch::kFloat64);
    const auto idx = targets[s].positive.nonzero();
    for (int64_t k = 0; k < idx.size(0); ++k) {
      const auto b = idx[k][0].item<int64_t>(), i = idx[k][1].item<int64_t>(), j = idx[k][2].item<int64_t>(),
                 a = idx[k][3].item<int64_t>();
      const auto t = targets[s].boxes[b][i][j][a];
      const imagery::BoundingBox box{0, t[0].item<double>(), t[1].item<double>(), t[2].item<double>(), t[3].item<double>()};
      const auto code = detector::encode_box(box, grids[s], grids[s].anchors[static_cast<std::size_t>(a)]);
      auto slot = r[b][i][j][a];
      slot[0] = code.tx;
      slot[1] = code.ty;
      slot[2] = code.tw;
      slot[3] = code.th;
      slot[4] = 40.0;
      slot.slice(0, 5) = targets[s].classes[b][i][j][a] * 80.0 - 40.0;
    }
    raw.push_back(r);
  }
  const auto perfect = detection_loss(raw, targets, cfg, w);
  CHECK(perfect.positives == 3);
  CHECK(scalar(perfect.box) < 1e-6);
  CHECK(scalar(perfect.obj) < 1e-9);
  CHECK(scalar(perfect.cls) < 1e-9);

  const auto empty_targets = detector::build_targets({{}, {}}, cfg, 64, 64, torch::kFloat64);
  const auto bg = detection_loss(raw, empty_targets, cfg, w);
  CHECK(bg.positives == 0);
  CHECK(scalar(bg.box) == 0.0);
  CHECK(scalar(bg.cls) == 0.0);
  CHECK(scalar(bg.obj) > 0.0);

  std::vector<torch::Tensor> none;
  for (const auto& r : raw) none.push_back(r.slice(0, 0, 0));
  const auto no_targets = detector::build_targets({}, cfg, 64, 64, torch::kFloat64);
  CHECK_THROWS_AS(detection_loss(none, no_targets, cfg, w), ArgumentError);
}

TEST_CASE("restoration gradient matches central differences") {
  torch::manual_seed(5);
  IdentityExtractor id;
  const LossWeights w;
  auto x = torch::rand({1, 3, 32, 32}, torch::dtype(torch::kFloat64).requires_grad(true));
  const auto ref = (x.detach() + 0.3 * torch::rand({1, 3, 32, 32}, torch::kFloat64)).clamp(0.0, 1.0);
  restoration_loss(x, ref, w, &id).total.backward();
  const auto grad = x.grad().clone();
  torch::NoGradGuard guard;
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> c(0, 2), p(0, 31);
  for (int k = 0; k < 10; ++k) {
    const int ch = c(rng), i = p(rng), j = p(rng);
    const double h = 1e-6;
    auto plus = x.detach().clone(), minus = x.detach().clone();
    plus[0][ch][i][j] += h;
    minus[0][ch][i][j] -= h;
    const double num = (scalar(restoration_loss(plus, ref, w, &id).total) - scalar(restoration_loss(minus, ref, w, &id).total)) / (2 * h);
    const double ana = grad[0][ch][i][j].item<double>();
    CHECK(std::abs(num - ana) <= 1e-3 * std::max({std::abs(num), std::abs(ana), 1e-8}));
  }
}

}  // TEST_SUITE
