#include "hopseg/losses.hpp"

namespace hopseg {

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double gamma,
                         double alpha) {
  auto t = targets.to(logits.dtype());
  auto p = torch::sigmoid(logits);
  auto ce = torch::binary_cross_entropy_with_logits(logits, t, {}, {}, torch::Reduction::None);
  auto modulation = torch::pow(t * (1 - p) + (1 - t) * p, gamma);
  auto alpha_w = t * alpha + (1 - t) * (1 - alpha);
  return (alpha_w * modulation * ce).mean();
}

torch::Tensor box_l1_loss(const torch::Tensor& pred_boxes, const torch::Tensor& gt_boxes) {
  return torch::l1_loss(pred_boxes, gt_boxes.to(pred_boxes.dtype()));
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& gt_masks, double eps) {
  auto p = probs.flatten(1);
  auto g = gt_masks.to(probs.dtype()).flatten(1);
  auto numer = 2.0 * (p * g).sum(1) + eps;
  auto denom = p.sum(1) + g.sum(1) + eps;
  return (1.0 - numer / denom).mean();
}

torch::Tensor mask_loss(const torch::Tensor& mask_logits, const torch::Tensor& gt_masks, double gamma,
                        double alpha, double eps) {
  auto logits = mask_logits.dim() == 2 ? mask_logits.unsqueeze(0) : mask_logits;
  auto gts = gt_masks.dim() == 2 ? gt_masks.unsqueeze(0) : gt_masks;
  return focal_loss(logits, gts, gamma, alpha) + dice_loss(torch::sigmoid(logits), gts, eps);
}

}  // namespace hopseg
