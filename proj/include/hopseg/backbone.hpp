#pragma once

#include <map>

#include <torch/torch.h>

namespace hopseg {

// Multi-scale dense features: level s has spatial size (H/2^s, W/2^s) for
// s in {2,3,4,5}; mask_features matches the s=2 level spatially.
struct MultiScaleFeatures {
  std::map<int, torch::Tensor> levels;  // s -> (D_s, H/2^s, W/2^s)
  torch::Tensor mask_features;          // (D_m, H/4, W/4)
};

struct BackboneConfig {
  int64_t channels = 32;       // D_s, shared across levels
  int64_t mask_channels = 32;  // D_m
};

// Small strided convolutional pyramid; only the level-shape contract matters.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneConfig config = {});

  // image: (3, H, W) with H, W divisible by 32. Throws std::invalid_argument
  // naming the offending dimension otherwise.
  MultiScaleFeatures forward(const torch::Tensor& image);

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  torch::nn::Sequential stage2_{nullptr}, stage3_{nullptr}, stage4_{nullptr}, stage5_{nullptr};
  torch::nn::Sequential mask_head_{nullptr};  // the 2-layer conv map over the s=2 level
};
TORCH_MODULE(Backbone);

}  // namespace hopseg
