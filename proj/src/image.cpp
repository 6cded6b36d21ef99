// SPDX-License-Identifier: Apache-2.0
#include "sdnia/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "sdnia/errors.hpp"

namespace sdnia {

void check_image(const torch::Tensor& img, const std::string& what) {
  if (!img.defined()) throw ArgumentError(what + ": undefined tensor");
  if (img.dim() != 3 || img.size(0) != 3) {
    std::ostringstream os;
    os << what << ": expected a 3-channel [3, H, W] tensor, got shape " << img.sizes();
    throw ArgumentError(os.str());
  }
  if (!img.is_floating_point()) throw ArgumentError(what + ": expected a floating point tensor");
}

void check_batch(const torch::Tensor& batch, const std::string& what) {
  if (!batch.defined()) throw ArgumentError(what + ": undefined tensor");
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(0) < 1) {
    std::ostringstream os;
    os << what << ": expected a [B, 3, H, W] tensor, got shape " << batch.sizes();
    throw ArgumentError(os.str());
  }
  if (!batch.is_floating_point()) throw ArgumentError(what + ": expected a floating point tensor");
}

torch::Tensor load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("image file not found: " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void save_image(const torch::Tensor& img, const std::filesystem::path& path) {
  check_image(img);
  auto hwc = img.detach()
                 .to(torch::kFloat32)
                 .clamp(0.0, 1.0)
                 .mul(255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image: " + path.string());
}

torch::Tensor luminance(const torch::Tensor& img) {
  const int64_t cdim = img.dim() == 4 ? 1 : 0;
  auto r = img.select(cdim, 0);
  auto g = img.select(cdim, 1);
  auto b = img.select(cdim, 2);
  return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(cdim);
}

double contrast(const torch::Tensor& img) {
  return luminance(img.to(torch::kFloat64)).std(/*unbiased=*/false).item<double>();
}

torch::Tensor constant_image(int64_t height, int64_t width, double value, torch::Dtype dtype) {
  return torch::full({3, height, width}, value, torch::TensorOptions().dtype(dtype));
}

}  // namespace sdnia
