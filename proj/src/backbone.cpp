#include "hopseg/backbone.hpp"

#include <stdexcept>
#include <string>

namespace hopseg {

namespace {

torch::nn::Sequential down_block(int64_t in, int64_t out) {
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)),
      torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).stride(1).padding(1)),
      torch::nn::ReLU());
}

}  // namespace

BackboneImpl::BackboneImpl(BackboneConfig config) : config_(config) {
  const int64_t d = config_.channels;
  // stage2 downsamples twice: input -> H/4
  stage2_ = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(3, d, 3).stride(2).padding(1)), torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(d, d, 3).stride(2).padding(1)), torch::nn::ReLU());
  stage3_ = down_block(d, d);
  stage4_ = down_block(d, d);
  stage5_ = down_block(d, d);
  mask_head_ = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(d, d, 3).padding(1)), torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(d, config_.mask_channels, 3).padding(1)));
  register_module("stage2", stage2_);
  register_module("stage3", stage3_);
  register_module("stage4", stage4_);
  register_module("stage5", stage5_);
  register_module("mask_head", mask_head_);
}

MultiScaleFeatures BackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3)
    throw std::invalid_argument("backbone expects a (3, H, W) image");
  const int64_t h = image.size(1);
  const int64_t w = image.size(2);
  if (h % 32 != 0) throw std::invalid_argument("image height " + std::to_string(h) + " not divisible by 32");
  if (w % 32 != 0) throw std::invalid_argument("image width " + std::to_string(w) + " not divisible by 32");

  auto x = image.unsqueeze(0);
  auto x2 = stage2_->forward(x);
  auto x3 = stage3_->forward(x2);
  auto x4 = stage4_->forward(x3);
  auto x5 = stage5_->forward(x4);

  MultiScaleFeatures features;
  features.levels[2] = x2.squeeze(0);
  features.levels[3] = x3.squeeze(0);
  features.levels[4] = x4.squeeze(0);
  features.levels[5] = x5.squeeze(0);
  features.mask_features = mask_head_->forward(x2).squeeze(0);
  return features;
}

}  // namespace hopseg
