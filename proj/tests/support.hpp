// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sdnia/detector.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/imagery.hpp"

namespace sdnia::imagery {

// Lets doctest print boxes in failed comparisons.
inline std::ostream& operator<<(std::ostream& os, const BoundingBox& b) {
  return os << "{" << b.class_id << " " << b.cx << " " << b.cy << " " << b.w << " " << b.h << "}";
}

}  // namespace sdnia::imagery

namespace sdnia::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("sdnia_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline imagery::DatasetManifest shapes(std::size_t count, int64_t size, std::uint64_t seed,
                                       const std::string& name = "shapes") {
  imagery::ShapesOptions o;
  o.count = count;
  o.size = size;
  o.seed = seed;
  o.name = name;
  return imagery::make_shapes_dataset(o);
}

inline detector::Detection make_detection(const imagery::BoundingBox& box, double confidence) {
  detector::Detection d;
  d.box = box;
  d.class_id = box.class_id;
  d.confidence = confidence;
  d.class_score = 1.0;
  return d;
}

// ---------------------------------------------------------------------------------------------
// Independent oracles. They follow the textbook definitions directly and share no code with the
// library under test.

/// IoU by counting sample points of an n x n lattice over [lo, hi]^2 that fall inside each box.
inline double raster_iou(const imagery::BoundingBox& a, const imagery::BoundingBox& b, double lo, double hi, int n) {
  const double step = (hi - lo) / n;
  long inter = 0, uni = 0;
  for (int i = 0; i < n; ++i) {
    const double y = lo + (i + 0.5) * step;
    for (int j = 0; j < n; ++j) {
      const double x = lo + (j + 0.5) * step;
      const bool in_a = x >= a.x1() && x < a.x2() && y >= a.y1() && y < a.y2();
      const bool in_b = x >= b.x1() && x < b.x2() && y >= b.y1() && y < b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Corner-form IoU written out from the definition.
inline double plain_iou(const imagery::BoundingBox& a, const imagery::BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

struct OracleImage {
  std::vector<detector::Detection> detections;
  std::vector<imagery::BoundingBox> ground_truth;
};

/// Brute-force AP. For every rank cutoff k the matching of the top-k detections is recomputed
/// from scratch, giving the (recall, precision) point of that cutoff. Interpolated precision at
/// recall r is the best precision of any cutoff reaching recall >= r. Both integration rules
/// are evaluated from those points.
inline double oracle_ap(const std::vector<OracleImage>& images, int class_id, double threshold, bool coco101) {
  struct Ranked {
    double confidence;
    std::size_t image;
    std::size_t index;
    long order;
  };
  std::vector<Ranked> ranked;
  long order = 0;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t d = 0; d < images[i].detections.size(); ++d) {
      if (images[i].detections[d].class_id == class_id) ranked.push_back({images[i].detections[d].confidence, i, d, order});
      ++order;
    }
    for (const auto& g : images[i].ground_truth) n_gt += g.class_id == class_id;
  }
  if (n_gt == 0) return std::numeric_limits<double>::quiet_NaN();
  if (ranked.empty()) return 0.0;
  // Insertion sort: descending confidence, ties by input order.
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    for (std::size_t j = i; j > 0; --j) {
      const auto& p = ranked[j - 1];
      const auto& q = ranked[j];
      const bool swap = q.confidence > p.confidence || (q.confidence == p.confidence && q.order < p.order);
      if (!swap) break;
      std::swap(ranked[j - 1], ranked[j]);
    }
  }

  std::vector<double> recall, precision;
  for (std::size_t k = 1; k <= ranked.size(); ++k) {
    std::vector<std::vector<bool>> taken(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) taken[i].assign(images[i].ground_truth.size(), false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const auto& img = images[ranked[r].image];
      const auto& det = img.detections[ranked[r].index];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < img.ground_truth.size(); ++g) {
        if (img.ground_truth[g].class_id != class_id || taken[ranked[r].image][g]) continue;
        const double v = plain_iou(det.box, img.ground_truth[g]);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best >= threshold) {
        taken[ranked[r].image][best_g] = true;
        ++tp;
      }
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k));
  }
  auto interpolated = [&](double r) {
    double best = 0.0;
    for (std::size_t k = 0; k < recall.size(); ++k) {
      if (recall[k] >= r) best = std::max(best, precision[k]);
    }
    return best;
  };
  if (coco101) {
    double sum = 0.0;
    for (int i = 0; i <= 100; ++i) sum += interpolated(i / 100.0);
    return sum / 101.0;
  }
  double area = 0.0, previous = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    if (recall[k] > previous) {
      area += (recall[k] - previous) * interpolated(recall[k]);
      previous = recall[k];
    }
  }
  return area;
}

/// Random boxes with corners on a 1/16 lattice inside the unit square.
inline imagery::BoundingBox random_box(std::mt19937_64& rng, int class_id) {
  std::uniform_int_distribution<int> pos(0, 12), ext(2, 8);
  const double x1 = pos(rng) / 16.0, y1 = pos(rng) / 16.0;
  const double w = ext(rng) / 16.0, h = ext(rng) / 16.0;
  return imagery::BoundingBox::from_corners(class_id, x1, y1, std::min(1.0, x1 + w), std::min(1.0, y1 + h));
}

/// MS-SSIM from nested loops over a 2-D Gaussian window, on [H][W] luminance arrays.
inline double oracle_ms_ssim(std::vector<std::vector<double>> a, std::vector<std::vector<double>> b, int levels,
                             const std::vector<double>& weights) {
  const int win = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  std::vector<double> g(win);
  double gs = 0.0;
  for (int i = 0; i < win; ++i) {
    g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  double wsum = 0.0;
  for (int l = 0; l < levels; ++l) wsum += weights[l];

  double result = 1.0;
  for (int l = 0; l < levels; ++l) {
    const int h = static_cast<int>(a.size()), w = static_cast<int>(a[0].size());
    double cs_sum = 0.0, ssim_sum = 0.0;
    int count = 0;
    for (int y = 0; y + win <= h; ++y) {
      for (int x = 0; x + win <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < win; ++i) {
          for (int j = 0; j < win; ++j) {
            const double k = g[i] * g[j];
            const double va = a[y + i][x + j], vb = b[y + i][x + j];
            ma += k * va;
            mb += k * vb;
            saa += k * va * va;
            sbb += k * vb * vb;
            sab += k * va * vb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        const double cs = (2 * cov + c2) / (var_a + var_b + c2);
        cs_sum += cs;
        ssim_sum += cs * (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ++count;
      }
    }
    const double mean = std::max(0.0, (l + 1 == levels ? ssim_sum : cs_sum) / count);
    result *= std::pow(mean, weights[l] / wsum);
    if (l + 1 < levels) {
      auto down = [](const std::vector<std::vector<double>>& m) {
        const std::size_t h2 = m.size() / 2, w2 = m[0].size() / 2;
        std::vector<std::vector<double>> out(h2, std::vector<double>(w2));
        for (std::size_t i = 0; i < h2; ++i)
          for (std::size_t j = 0; j < w2; ++j)
            out[i][j] = 0.25 * (m[2 * i][2 * j] + m[2 * i + 1][2 * j] + m[2 * i][2 * j + 1] + m[2 * i + 1][2 * j + 1]);
        return out;
      };
      a = down(a);
      b = down(b);
    }
  }
  return result;
}

/// Rec. 601 luma of a [3,H,W] tensor as nested vectors.
inline std::vector<std::vector<double>> luma_rows(const torch::Tensor& img) {
  auto t = img.to(torch::kFloat64).contiguous();
  auto acc = t.accessor<double, 3>();
  std::vector<std::vector<double>> out(t.size(1), std::vector<double>(t.size(2)));
  for (int64_t y = 0; y < t.size(1); ++y)
    for (int64_t x = 0; x < t.size(2); ++x)
      out[y][x] = 0.299 * acc[0][y][x] + 0.587 * acc[1][y][x] + 0.114 * acc[2][y][x];
  return out;
}

inline std::vector<OracleImage> to_oracle(const std::vector<evaluation::ImageResult>& images) {
  std::vector<OracleImage> out;
  for (const auto& im : images) out.push_back({im.detections, im.ground_truth});
  return out;
}

/// 1-3 images with up to 5 boxes and detections each, on a 1/16 lattice with tied confidences.
inline std::vector<evaluation::ImageResult> random_fixture(std::mt19937_64& rng, int n_classes) {
  std::uniform_int_distribution<int> n_images(1, 3), count(0, 5), cls(0, n_classes - 1);
  std::uniform_int_distribution<int> conf(1, 20);
  std::bernoulli_distribution near(0.6);
  std::vector<evaluation::ImageResult> images(static_cast<std::size_t>(n_images(rng)));
  int id = 0;
  for (auto& im : images) {
    im.image_id = "im" + std::to_string(id++);
    const int n_gt = count(rng);
    for (int g = 0; g < n_gt; ++g) im.ground_truth.push_back(random_box(rng, cls(rng)));
    const int n_det = count(rng);
    for (int d = 0; d < n_det; ++d) {
      imagery::BoundingBox box = random_box(rng, cls(rng));
      if (near(rng) && !im.ground_truth.empty()) {
        // Jitter a ground-truth box by whole lattice steps so IoUs land near the thresholds.
        const auto& g = im.ground_truth[static_cast<std::size_t>(d) % im.ground_truth.size()];
        std::uniform_int_distribution<int> jitter(-1, 1);
        const double x1 = std::clamp(g.x1() + jitter(rng) / 16.0, 0.0, 0.875);
        const double y1 = std::clamp(g.y1() + jitter(rng) / 16.0, 0.0, 0.875);
        const double x2 = std::clamp(g.x2() + jitter(rng) / 16.0, x1 + 1 / 16.0, 1.0);
        const double y2 = std::clamp(g.y2() + jitter(rng) / 16.0, y1 + 1 / 16.0, 1.0);
        box = imagery::BoundingBox::from_corners(g.class_id, x1, y1, x2, y2);
      }
      // Coarse confidences so ties occur.
      im.detections.push_back(make_detection(box, conf(rng) / 20.0));
    }
  }
  return images;
}

inline bool same_or_nan(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace sdnia::testing
