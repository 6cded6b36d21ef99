// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cmath>
#include <cstdio>

#include "sdnia/errors.hpp"
#include "sdnia/imagery.hpp"

namespace sdnia::imagery {
namespace {

using Color = std::array<float, 3>;

double overlap_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

float luma(const Color& c) { return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2]; }

struct Canvas {
  int64_t n;
  std::vector<float> data;  // CHW

  explicit Canvas(int64_t size) : n(size), data(static_cast<std::size_t>(3 * size * size)) {}

  void set(int64_t y, int64_t x, const Color& c) {
    for (int ch = 0; ch < 3; ++ch) data[static_cast<std::size_t>((ch * n + y) * n + x)] = c[ch];
  }
  Color get(int64_t y, int64_t x) const {
    Color c;
    for (int ch = 0; ch < 3; ++ch) c[ch] = data[static_cast<std::size_t>((ch * n + y) * n + x)];
    return c;
  }
};

void paint_background(Canvas& canvas, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Color a{u(rng), u(rng), u(rng)}, b{u(rng), u(rng), u(rng)};
  for (auto& v : a) v = 0.25f + 0.5f * v;
  for (auto& v : b) v = 0.25f + 0.5f * v;
  const float angle = 6.2831853f * u(rng);
  const float dx = std::cos(angle), dy = std::sin(angle);
  const float freq = 2.0f + 4.0f * u(rng), phase = 6.2831853f * u(rng);
  std::normal_distribution<float> noise(0.0f, 0.02f);
  const auto n = canvas.n;
  for (int64_t y = 0; y < n; ++y) {
    for (int64_t x = 0; x < n; ++x) {
      const float fx = (static_cast<float>(x) + 0.5f) / static_cast<float>(n) - 0.5f;
      const float fy = (static_cast<float>(y) + 0.5f) / static_cast<float>(n) - 0.5f;
      const float s = std::clamp(0.5f + fx * dx + fy * dy, 0.0f, 1.0f);
      const float texture = 0.05f * std::sin(freq * 6.2831853f * (fx * dy - fy * dx) + phase);
      Color c;
      for (int ch = 0; ch < 3; ++ch) c[ch] = std::clamp(a[ch] * (1 - s) + b[ch] * s + texture + noise(rng), 0.0f, 1.0f);
      canvas.set(y, x, c);
    }
  }
}

Color object_color(const Canvas& canvas, const BoundingBox& box, std::mt19937_64& rng) {
  const auto n = canvas.n;
  const Color bg = canvas.get(std::clamp<int64_t>(static_cast<int64_t>(box.cy * n), 0, n - 1),
                              std::clamp<int64_t>(static_cast<int64_t>(box.cx * n), 0, n - 1));
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Color best{};
  float best_gap = -1.0f;
  for (int attempt = 0; attempt < 16; ++attempt) {
    Color c{u(rng), u(rng), u(rng)};
    const float gap = std::abs(luma(c) - luma(bg));
    if (gap > best_gap) {
      best = c;
      best_gap = gap;
    }
    if (gap > 0.3f) break;
  }
  return best;
}

// Pixel centers inside the shape get the color. Returns the tight pixel bounds actually painted.
BoundingBox paint_shape(Canvas& canvas, int cls, double cx, double cy, double extent, const Color& color) {
  const auto n = static_cast<double>(canvas.n);
  const double half = 0.5 * extent;
  double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
  for (int64_t y = 0; y < canvas.n; ++y) {
    for (int64_t x = 0; x < canvas.n; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / n, py = (static_cast<double>(y) + 0.5) / n;
      const double rx = px - cx, ry = py - cy;
      bool inside = false;
      switch (cls) {
        case 0:  // circle
          inside = rx * rx + ry * ry <= half * half;
          break;
        case 1:  // square
          inside = std::abs(rx) <= half && std::abs(ry) <= half;
          break;
        default:  // upward triangle
          inside = ry <= half && ry >= -half && std::abs(rx) <= 0.5 * (ry + half);
          break;
      }
      if (inside) {
        canvas.set(y, x, color);
        minx = std::min(minx, static_cast<double>(x));
        maxx = std::max(maxx, static_cast<double>(x));
        miny = std::min(miny, static_cast<double>(y));
        maxy = std::max(maxy, static_cast<double>(y));
      }
    }
  }
  return BoundingBox::from_corners(cls, minx / n, miny / n, (maxx + 1.0) / n, (maxy + 1.0) / n);
}

}  // namespace

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle"};
  return names;
}

DatasetManifest make_shapes_dataset(const ShapesOptions& options) {
  if (options.size < 8) throw ArgumentError("make_shapes_dataset: image size must be >= 8");
  if (options.min_objects < 1 || options.max_objects < options.min_objects) {
    throw ArgumentError("make_shapes_dataset: invalid object count range");
  }
  if (!(options.min_extent > 0.0 && options.max_extent <= 0.9 && options.min_extent <= options.max_extent)) {
    throw ArgumentError("make_shapes_dataset: invalid extent range");
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> count_dist(options.min_objects, options.max_objects);
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(shape_class_names().size()) - 1);

  DatasetManifest out;
  out.name = options.name;
  out.split = options.split;
  out.class_names = shape_class_names();
  out.entries.reserve(options.count);

  for (std::size_t i = 0; i < options.count; ++i) {
    Canvas canvas(options.size);
    paint_background(canvas, rng);
    const int n_obj = count_dist(rng);
    std::vector<BoundingBox> placed;
    for (int k = 0; k < n_obj; ++k) {
      for (int attempt = 0; attempt < 30; ++attempt) {
        const double extent = options.min_extent + (options.max_extent - options.min_extent) * u(rng);
        const double cx = 0.5 * extent + (1.0 - extent) * u(rng);
        const double cy = 0.5 * extent + (1.0 - extent) * u(rng);
        const BoundingBox probe{0, cx, cy, extent, extent};
        bool clash = false;
        for (const auto& p : placed) clash = clash || overlap_iou(p, probe) > 0.05;
        if (clash) continue;
        const int cls = class_dist(rng);
        const Color color = object_color(canvas, probe, rng);
        placed.push_back(paint_shape(canvas, cls, cx, cy, extent, color));
        break;
      }
    }
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%05zu", options.name.c_str(), i);
    LabeledImage entry;
    entry.image_id = id;
    entry.reference_id = id;
    entry.origin = Origin::original;
    entry.boxes = std::move(placed);
    entry.pixels = torch::from_blob(canvas.data.data(), {3, options.size, options.size}, torch::kFloat32).clone();
    out.entries.push_back(std::move(entry));
  }
  return out;
}

}  // namespace sdnia::imagery
