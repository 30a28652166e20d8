#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hopseg/losses.hpp"

using namespace hopseg;

namespace {

// independent elementwise oracle in double
double focal_oracle(const std::vector<double>& logits, const std::vector<double>& targets,
                    double gamma = 2.0, double alpha = 0.25) {
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    const double t = targets[i];
    const double ce = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    const double pt = t * p + (1.0 - t) * (1.0 - p);
    const double at = t * alpha + (1.0 - t) * (1.0 - alpha);
    sum += at * std::pow(1.0 - pt, gamma) * ce;
  }
  return sum / static_cast<double>(logits.size());
}

double dice_oracle(const std::vector<std::vector<double>>& probs,
                   const std::vector<std::vector<double>>& gts, double eps = 1.0) {
  double sum = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    double inter = 0.0, p = 0.0, g = 0.0;
    for (size_t k = 0; k < probs[i].size(); ++k) {
      inter += probs[i][k] * gts[i][k];
      p += probs[i][k];
      g += gts[i][k];
    }
    sum += 1.0 - (2.0 * inter + eps) / (p + g + eps);
  }
  return sum / static_cast<double>(probs.size());
}

// central finite difference over every element of a leaf tensor
bool gradient_matches(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                      torch::Tensor x, double h = 1e-5, double rtol = 1e-3,
                      double atol = 1e-7) {
  auto leaf = x.clone().set_requires_grad(true);
  f(leaf).backward();
  auto analytic = leaf.grad().reshape({-1});
  auto flat = x.reshape({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = x.clone().reshape({-1});
    auto minus = x.clone().reshape({-1});
    plus[i] += h;
    minus[i] -= h;
    const double fd = (f(plus.reshape(x.sizes())).item<double>() -
                       f(minus.reshape(x.sizes())).item<double>()) /
                      (2.0 * h);
    const double an = analytic[i].item<double>();
    if (std::abs(fd - an) > atol + rtol * std::max(std::abs(fd), std::abs(an))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("focal loss matches the elementwise oracle") {
  std::mt19937_64 rng(7);
  std::vector<double> logits(24), targets(24);
  for (size_t i = 0; i < logits.size(); ++i) {
    logits[i] = (static_cast<double>(rng() >> 11) * 0x1.0p-53) * 8.0 - 4.0;
    targets[i] = rng() % 2 ? 1.0 : 0.0;
  }
  auto lt = torch::tensor(logits, torch::kFloat64).reshape({4, 6});
  auto tt = torch::tensor(targets, torch::kFloat64).reshape({4, 6});
  CHECK(focal_loss(lt, tt).item<double>() ==
        doctest::Approx(focal_oracle(logits, targets)).epsilon(1e-9));
}

TEST_CASE("focal loss extremes") {
  // confident and correct: near-zero loss
  auto logits = torch::tensor({12.0, -12.0}, torch::kFloat64);
  auto targets = torch::tensor({1.0, 0.0}, torch::kFloat64);
  CHECK(focal_loss(logits, targets).item<double>() < 1e-6);
  // confident and wrong: large loss
  CHECK(focal_loss(-logits, targets).item<double>() > 1.0);
}

TEST_CASE("box L1 loss") {
  auto a = torch::tensor({{0.5, 0.5, 0.2, 0.2}}, torch::kFloat64);
  auto b = torch::tensor({{0.4, 0.5, 0.2, 0.6}}, torch::kFloat64);
  CHECK(box_l1_loss(a, b).item<double>() == doctest::Approx((0.1 + 0.4) / 4.0).epsilon(1e-12));
  CHECK(box_l1_loss(a, a).item<double>() == 0.0);
}

TEST_CASE("dice loss matches the per-instance oracle") {
  std::mt19937_64 rng(11);
  std::vector<std::vector<double>> probs(3, std::vector<double>(16)), gts = probs;
  for (auto& row : probs)
    for (auto& v : row) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  for (auto& row : gts)
    for (auto& v : row) v = rng() % 3 == 0 ? 1.0 : 0.0;
  auto pt = torch::zeros({3, 4, 4}, torch::kFloat64);
  auto gt = torch::zeros({3, 4, 4}, torch::kFloat64);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t k = 0; k < 16; ++k) {
      pt[i][k / 4][k % 4] = probs[static_cast<size_t>(i)][static_cast<size_t>(k)];
      gt[i][k / 4][k % 4] = gts[static_cast<size_t>(i)][static_cast<size_t>(k)];
    }
  CHECK(dice_loss(pt, gt).item<double>() == doctest::Approx(dice_oracle(probs, gts)).epsilon(1e-9));
}

TEST_CASE("dice loss is zero on a perfect binary match up to the smoothing term") {
  auto m = torch::tensor({{{1.0, 0.0}, {0.0, 1.0}}}, torch::kFloat64);
  // (2*2+1)/(2+2+1) = 1 exactly
  CHECK(dice_loss(m, m).item<double>() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("loss gradients match central finite differences") {
  torch::manual_seed(3);
  auto logits = torch::randn({3, 5}, torch::kFloat64);
  auto targets = (torch::rand({3, 5}, torch::kFloat64) > 0.6).to(torch::kFloat64);
  CHECK(gradient_matches([&](const torch::Tensor& x) { return focal_loss(x, targets); }, logits));

  auto boxes = torch::rand({4, 4}, torch::kFloat64) * 0.8 + 0.1;
  auto gt_boxes = torch::rand({4, 4}, torch::kFloat64) * 0.8 + 0.1;
  CHECK(gradient_matches([&](const torch::Tensor& x) { return box_l1_loss(x, gt_boxes); }, boxes));

  auto mask_logits = torch::randn({2, 4, 4}, torch::kFloat64);
  auto gt_masks = (torch::rand({2, 4, 4}, torch::kFloat64) > 0.5).to(torch::kFloat64);
  CHECK(gradient_matches(
      [&](const torch::Tensor& x) { return dice_loss(torch::sigmoid(x), gt_masks); }, mask_logits));
  CHECK(gradient_matches([&](const torch::Tensor& x) { return mask_loss(x, gt_masks); }, mask_logits));
}

TEST_CASE("default loss weights") {
  LossWeights w;
  CHECK(w.cls == 4.0);
  CHECK(w.bbox == 2.0);
  CHECK(w.mask == 5.0);
}
