// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

namespace sdnia {

// An image is a float CHW tensor of shape [3, H, W], RGB, values in [0, 1].
// Batches are [B, 3, H, W]. Spatial size is (H, W) throughout.

/// Throws ArgumentError unless `img` is a [3, H, W] floating tensor.
void check_image(const torch::Tensor& img, const std::string& what = "image");

/// Throws ArgumentError unless `batch` is a [B, 3, H, W] floating tensor with B >= 1.
void check_batch(const torch::Tensor& batch, const std::string& what = "batch");

/// Reads any format OpenCV decodes. Throws DataError when the file is missing or unreadable.
torch::Tensor load_image(const std::filesystem::path& path);

/// Writes an 8-bit image; the format follows the extension (PNG recommended).
void save_image(const torch::Tensor& img, const std::filesystem::path& path);

/// Rec.601 luma: 0.299 R + 0.587 G + 0.114 B. Accepts [3,H,W] or [B,3,H,W]; keeps a channel dim of 1.
torch::Tensor luminance(const torch::Tensor& img);

/// Standard deviation of the luminance; the contrast statistic used across the project.
double contrast(const torch::Tensor& img);

/// Constant-color image.
torch::Tensor constant_image(int64_t height, int64_t width, double value,
                             torch::Dtype dtype = torch::kFloat32);

}  // namespace sdnia
