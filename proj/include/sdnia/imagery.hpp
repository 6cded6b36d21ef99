// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace sdnia::imagery {

/// Normalized, class-tagged box in center form.
struct BoundingBox {
  int class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static BoundingBox from_corners(int class_id, double x1, double y1, double x2, double y2);

  /// Clips the extent to the unit square. Returns nullopt if nothing with positive area remains.
  std::optional<BoundingBox> clipped() const;

  bool operator==(const BoundingBox&) const = default;
};

/// True when 0 <= cx,cy <= 1 and 0 < w,h <= 1 and class_id >= 0.
bool is_valid(const BoundingBox& box);

/// Intersection over union of two axis-aligned boxes; 0 when the union is empty.
double box_iou(const BoundingBox& a, const BoundingBox& b);

enum class Origin { original, stylized, fog_synth, gamma_synth };

std::string_view to_string(Origin origin);
Origin parse_origin(std::string_view text);

struct LabeledImage {
  std::string image_id;
  std::filesystem::path image_path;  // empty for purely in-memory images
  std::filesystem::path label_path;
  torch::Tensor pixels;               // [3, H, W]; undefined until loaded
  std::vector<BoundingBox> boxes;
  Origin origin = Origin::original;
  std::string reference_id;           // equals image_id for originals

  bool has_pixels() const { return pixels.defined(); }
};

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct DatasetManifest {
  std::string name;
  std::vector<LabeledImage> entries;
  std::vector<std::string> class_names;
  Split split = Split::train;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const LabeledImage* find(std::string_view image_id) const;

  /// Unique ids, class ids in range, valid boxes, origin/reference consistency. Throws DataError.
  void validate() const;
};

struct LoadOptions {
  bool load_pixels = true;
};

struct LoadReport {
  std::vector<std::string> diagnostics;
  std::size_t rejected_entries = 0;
  std::size_t dropped_boxes = 0;
};

/// Parses a label file of "class cx cy w h" lines. Malformed lines and out-of-range values throw
/// DataError naming file and line. Boxes that clip to zero area are dropped and counted.
std::vector<BoundingBox> read_labels(const std::filesystem::path& path, std::size_t* dropped = nullptr,
                                     std::vector<std::string>* diagnostics = nullptr);
void write_labels(const std::filesystem::path& path, const std::vector<BoundingBox>& boxes);

/// Loads a manifest file. A missing image file is fatal (DataError); an entry with a malformed or
/// out-of-range label is rejected with a diagnostic and the load continues.
DatasetManifest load_dataset(const std::filesystem::path& manifest_path, const LoadOptions& options = {},
                             LoadReport* report = nullptr);

/// Writes the manifest file plus any in-memory pixels and labels that have no file yet.
/// Image and label files go under `<dir>/images` and `<dir>/labels`.
void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& manifest_path);

/// Loads pixels for every entry that only has a path.
void load_pixels(DatasetManifest& manifest);

DatasetManifest filter_classes(const DatasetManifest& dataset, const std::vector<std::string>& keep);

/// Union of originals and stylized sets; every stylized reference_id must resolve to an original.
DatasetManifest mix_datasets(const DatasetManifest& originals, const DatasetManifest& stylized);

/// Normalized distance to the image center, 0 at the center and 1 at the corners. Shape [1, H, W].
torch::Tensor fog_depth(int64_t height, int64_t width, torch::Dtype dtype = torch::kFloat32);

/// Atmospheric scattering: I = J t + A (1 - t), t = exp(-beta d).
torch::Tensor synthesize_fog(const torch::Tensor& image, double beta, double airlight);

/// Power-law darkening: out = in^gamma.
torch::Tensor synthesize_gamma(const torch::Tensor& image, double gamma);

struct DegradationRanges {
  double beta_min = 1.0;
  double beta_max = 3.0;
  double airlight_min = 0.6;
  double airlight_max = 0.9;
  double gamma_min = 1.5;
  double gamma_max = 5.0;
};

/// Draws gamma uniformly from the configured range.
double sample_gamma(std::mt19937_64& rng, const DegradationRanges& ranges = {});

/// Builds a degraded copy of a clean test set (fog_synth or gamma_synth). Each output keeps the
/// boxes and points its reference_id at the clean source. Seeded per call.
DatasetManifest degrade_dataset(const DatasetManifest& clean, Origin kind, std::uint64_t seed,
                                const DegradationRanges& ranges = {});

/// Splits off `fraction` of the content groups (entries sharing a reference_id), deterministic for a seed.
std::pair<DatasetManifest, DatasetManifest> split_validation(const DatasetManifest& dataset, double fraction,
                                                             std::uint64_t seed);

struct ShapesOptions {
  std::size_t count = 200;
  int64_t size = 64;
  int min_objects = 1;
  int max_objects = 3;
  double min_extent = 0.2;  // fraction of the image side
  double max_extent = 0.45;
  std::uint64_t seed = 0;
  std::string name = "shapes";
  Split split = Split::train;
};

/// Class names of the procedural shapes dataset.
const std::vector<std::string>& shape_class_names();

/// Procedural detection dataset: textured backgrounds with colored circles, squares and triangles.
DatasetManifest make_shapes_dataset(const ShapesOptions& options);

}  // namespace sdnia::imagery
