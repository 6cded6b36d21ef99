// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace sdnia::nia {

/// Shallow full-resolution adaptation CNN placed in front of the detector.
///
///   Conv(3->32, 3x3) -> Conv(32->64, 3x3) -> [Conv(64->32, 1x1) -> Conv(32->64, 3x3)] + skip
///   -> Conv(64->3, 3x3) -> sigmoid
///
/// Every convolution is stride 1 with same padding, so the output keeps the input size. Inner
/// convolutions use leaky ReLU (slope 0.1); there are no normalization layers.
class NIANetworkImpl : public torch::nn::Module {
 public:
  static constexpr double kLeakySlope = 0.1;

  NIANetworkImpl();

  /// [B,3,H,W] or [3,H,W] with H, W >= 8; returns the same shape with values in (0, 1).
  torch::Tensor forward(const torch::Tensor& input);

  /// Output of the residual block alone, for wiring tests.
  torch::Tensor residual(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
  torch::nn::Conv2d res_reduce{nullptr};
  torch::nn::Conv2d res_expand{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(NIANetwork);

/// Number of trainable scalars (parameters with requires_grad).
int64_t parameter_count(const torch::nn::Module& module);

/// Parameter count of a k x k convolution with bias.
constexpr int64_t conv_parameter_count(int64_t in_channels, int64_t out_channels, int64_t kernel) {
  return kernel * kernel * in_channels * out_channels + out_channels;
}

}  // namespace sdnia::nia
