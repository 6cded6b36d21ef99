// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>

#include "sdnia/errors.hpp"
#include "sdnia/image.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/stylizer.hpp"
#include "support.hpp"

using namespace sdnia;
using namespace sdnia::stylizer;

namespace {

StyleImage fog_style(std::uint64_t seed) {
  auto base = testing::shapes(1, 32, seed).entries[0].pixels;
  return {"fog" + std::to_string(seed), imagery::synthesize_fog(base, 3.0, 0.85)};
}

StyleImage dark_style(std::uint64_t seed) {
  auto base = testing::shapes(1, 32, seed).entries[0].pixels;
  return {"dark" + std::to_string(seed), imagery::synthesize_gamma(base, 4.0)};
}

}  // namespace

TEST_SUITE("stylizer") {

TEST_CASE("blend_style endpoints and midpoint") {
  const StyleVector c{{0.0, 2.0}}, s{{4.0, 0.0}};
  CHECK(blend_style(c, s, 0.0) == c);
  CHECK(blend_style(c, s, 1.0) == s);
  CHECK(blend_style(c, s, 0.5) == StyleVector{{2.0, 1.0}});
  CHECK_THROWS_AS(blend_style(c, StyleVector{{1.0}}, 0.5), ArgumentError);
  CHECK_THROWS_AS(blend_style(c, s, 1.5), ArgumentError);
  CHECK_THROWS_AS(blend_style(c, s, -0.1), ArgumentError);
}

TEST_CASE("blend_style is linear in alpha") {
  const StyleVector c{{0.3, -1.0, 5.0}}, s{{1.3, 2.0, -5.0}};
  for (double a : {0.1, 0.25, 0.7}) {
    const auto v = blend_style(c, s, a);
    for (std::size_t i = 0; i < 3; ++i) CHECK(v.values[i] == doctest::Approx(a * s.values[i] + (1 - a) * c.values[i]));
  }
}

TEST_CASE("procedural predict is deterministic and separates styles") {
  ProceduralBackend backend;
  const auto f = fog_style(1), d = dark_style(1);
  const auto v1 = predict_style(backend, f.pixels);
  CHECK(v1 == predict_style(backend, f.pixels));
  CHECK(v1.dim() == ProceduralBackend::kDim);
  CHECK_FALSE(v1 == predict_style(backend, d.pixels));
}

TEST_CASE("alpha = 0 returns the content exactly") {
  ProceduralBackend backend;
  const auto content = testing::shapes(3, 32, 4);
  for (const auto& e : content.entries) {
    const auto out = stylize(backend, e, fog_style(2), 0.0);
    CHECK(torch::equal(out.pixels, e.pixels));
    CHECK(out.boxes == e.boxes);
  }
}

TEST_CASE("full-strength fog style lowers contrast") {
  ProceduralBackend backend;
  const auto content = testing::shapes(4, 32, 8);
  for (const auto& e : content.entries) {
    const auto out = stylize(backend, e, fog_style(3), 1.0);
    CHECK(contrast(out.pixels) < 0.7 * contrast(e.pixels));
    CHECK(out.pixels.min().item<double>() >= 0.0);
    CHECK(out.pixels.max().item<double>() <= 1.0);
  }
}

TEST_CASE("stylized output keeps labels and points at its content") {
  ProceduralBackend backend;
  const auto content = testing::shapes(1, 32, 9).entries[0];
  const auto out = stylize(backend, content, dark_style(5), 0.6);
  CHECK(out.boxes == content.boxes);
  CHECK(out.origin == imagery::Origin::stylized);
  CHECK(out.reference_id == content.image_id);
  CHECK(out.image_id == content.image_id + "__dark5__a0.60");
  const auto parsed = parse_stylized_id(out.image_id);
  REQUIRE(parsed.has_value());
  CHECK(parsed->content_id == content.image_id);
  CHECK(parsed->style_id == "dark5");
  CHECK(parsed->alpha == doctest::Approx(0.6));
  CHECK_FALSE(parse_stylized_id("plain").has_value());
}

TEST_CASE("batch_stylize count is contents x styles x alphas") {
  ProceduralBackend backend;
  const auto content = testing::shapes(2, 24, 10);
  const std::vector<StyleImage> styles{fog_style(1), dark_style(2), fog_style(3)};
  StyleCache cache;
  const auto r = batch_stylize(backend, content, styles, {0.5, 1.0}, {.sink = {}, .cache = &cache});
  CHECK(r.expected == 12);
  CHECK(r.manifest.size() == 12);
  CHECK(r.failures == 0);
  CHECK(cache.size() == 5);
  CHECK(r.manifest.entries[0].image_id == stylized_id(content.entries[0].image_id, "fog1", 0.5));
  imagery::mix_datasets(content, r.manifest).validate();

  const auto none = batch_stylize(backend, content, styles, {});
  CHECK(none.manifest.empty());
  CHECK(none.expected == 0);
  CHECK_THROWS_AS(batch_stylize(backend, content, styles, {1.2}), ArgumentError);
}

TEST_CASE("batch_stylize is reproducible") {
  ProceduralBackend backend;
  const auto content = testing::shapes(2, 24, 12);
  const std::vector<StyleImage> styles{fog_style(4), dark_style(4)};
  const auto a = batch_stylize(backend, content, styles, {0.4, 1.0});
  const auto b = batch_stylize(backend, content, styles, {0.4, 1.0});
  REQUIRE(a.manifest.size() == b.manifest.size());
  for (std::size_t i = 0; i < a.manifest.size(); ++i) CHECK(torch::equal(a.manifest.entries[i].pixels, b.manifest.entries[i].pixels));
}

TEST_CASE("batch sink may release pixels") {
  ProceduralBackend backend;
  const auto content = testing::shapes(2, 24, 13);
  std::size_t seen = 0;
  BatchOptions opts;
  opts.sink = [&](imagery::LabeledImage& e) {
    ++seen;
    e.pixels = torch::Tensor();
  };
  const auto r = batch_stylize(backend, content, {fog_style(1)}, {1.0}, opts);
  CHECK(seen == 2);
  CHECK_FALSE(r.manifest.entries[0].has_pixels());
}

TEST_CASE("style cache computes once per key") {
  StyleCache cache;
  int calls = 0;
  auto compute = [&] {
    ++calls;
    return StyleVector{{1.0}};
  };
  cache.get_or_compute("k", compute);
  cache.get_or_compute("k", compute);
  CHECK(calls == 1);
  CHECK(cache.lookup("k").has_value());
  CHECK_FALSE(cache.lookup("other").has_value());
}

TEST_CASE("backend construction errors name the backend") {
  try {
    make_backend({"torchscript", "/nonexistent/dir"});
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(std::string(e.what()).find("torchscript") != std::string::npos);
  }
  CHECK_THROWS_AS(make_backend({"magic", ""}), BackendError);
  CHECK(make_backend({}) ->name() == "procedural");
}

TEST_CASE("torchscript backend") {
  const char* dir = std::getenv("SDNIA_TEST_TORCHSCRIPT_DIR");
  if (dir == nullptr) {
    MESSAGE("SDNIA_TEST_TORCHSCRIPT_DIR not set; skipping");
    return;
  }
  const auto backend = make_backend({"torchscript", dir});
  CHECK(backend->dim() == 6);
  const auto content = testing::shapes(1, 32, 14).entries[0];
  const auto v = predict_style(*backend, content.pixels);
  CHECK(v == predict_style(*backend, content.pixels));
  const auto same = stylize(*backend, content, fog_style(6), 0.0);
  CHECK((same.pixels - content.pixels).abs().max().item<double>() < 1e-4);
  const auto styled = stylize(*backend, content, fog_style(6), 1.0);
  CHECK(contrast(styled.pixels) < contrast(content.pixels));
}

}  // TEST_SUITE
