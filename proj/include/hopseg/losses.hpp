#pragma once

#include <torch/torch.h>

namespace hopseg {

struct LossWeights {
  double cls = 4.0;
  double bbox = 2.0;
  double mask = 5.0;
};

// Sigmoid focal loss, mean over elements. `targets` is a {0,1} tensor of the
// same shape as `logits`.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double gamma = 2.0,
                         double alpha = 0.25);

// Mean absolute error over boxes and coordinates (cxcywh in [0,1]).
torch::Tensor box_l1_loss(const torch::Tensor& pred_boxes, const torch::Tensor& gt_boxes);

// Per-instance dice loss on probabilities, mean over instances. First
// dimension indexes instances; remaining dimensions are flattened.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& gt_masks, double eps = 1.0);

// Mask supervision: focal on logits plus dice on sigmoid(logits).
torch::Tensor mask_loss(const torch::Tensor& mask_logits, const torch::Tensor& gt_masks,
                        double gamma = 2.0, double alpha = 0.25, double eps = 1.0);

}  // namespace hopseg
