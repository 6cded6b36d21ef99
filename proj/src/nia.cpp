// SPDX-License-Identifier: Apache-2.0
#include "sdnia/nia.hpp"

#include "sdnia/errors.hpp"

namespace sdnia::nia {
namespace {

torch::nn::Conv2d same_conv(int64_t in, int64_t out, int64_t k) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(1).padding(k / 2).bias(true));
}

torch::Tensor leaky(const torch::Tensor& x) {
  return torch::leaky_relu(x, NIANetworkImpl::kLeakySlope);
}

}  // namespace

NIANetworkImpl::NIANetworkImpl() {
  conv1 = register_module("conv1", same_conv(3, 32, 3));
  conv2 = register_module("conv2", same_conv(32, 64, 3));
  res_reduce = register_module("res_reduce", same_conv(64, 32, 1));
  res_expand = register_module("res_expand", same_conv(32, 64, 3));
  head = register_module("head", same_conv(64, 3, 3));
  // Mid-gray start: sigmoid(0) = 0.5.
  torch::NoGradGuard no_grad;
  head->bias.zero_();
}

torch::Tensor NIANetworkImpl::residual(const torch::Tensor& x) {
  return x + leaky(res_expand(leaky(res_reduce(x))));
}

torch::Tensor NIANetworkImpl::forward(const torch::Tensor& input) {
  const bool single = input.dim() == 3;
  const auto x = single ? input.unsqueeze(0) : input;
  if (x.dim() != 4 || x.size(1) != 3) {
    std::ostringstream os;
    os << "nia_forward: expected 3 input channels, got shape " << input.sizes();
    throw ArgumentError(os.str());
  }
  if (x.size(2) < 8 || x.size(3) < 8) throw ArgumentError("nia_forward: height and width must be >= 8");
  auto h = leaky(conv1(x));
  h = leaky(conv2(h));
  h = residual(h);
  auto out = torch::sigmoid(head(h));
  return single ? out.squeeze(0) : out;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) total += p.numel();
  }
  return total;
}

}  // namespace sdnia::nia
