#include "hopseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include <nlohmann/json.hpp>

namespace hopseg {

namespace {

double mask_iou(const torch::Tensor& a, const torch::Tensor& b) {
  const double inter = (a & b).sum().item<int64_t>();
  const double uni = (a | b).sum().item<int64_t>();
  return uni > 0.0 ? inter / uni : 0.0;
}

constexpr int kThresholds = 10;  // 0.50:0.05:0.95

double threshold_at(int t) { return 0.5 + 0.05 * t; }

// AP of one category at one IoU threshold: greedy score-ordered matching,
// 101-point interpolated precision.
double category_ap(const std::vector<std::vector<const EvalInstance*>>& gts_per_image,
                   const std::vector<std::vector<const EvalInstance*>>& preds_per_image,
                   double iou_threshold, int64_t n_gt) {
  struct Entry {
    double score;
    size_t image;
    size_t index;  // within-image prediction order
  };
  std::vector<Entry> entries;
  for (size_t i = 0; i < preds_per_image.size(); ++i)
    for (size_t k = 0; k < preds_per_image[i].size(); ++k)
      entries.push_back({preds_per_image[i][k]->score, i, k});
  // score descending, ties broken by (image, within-image index) ascending
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.image, a.index) < std::tie(b.image, b.index);
  });

  std::vector<std::vector<bool>> gt_used(gts_per_image.size());
  for (size_t i = 0; i < gts_per_image.size(); ++i) gt_used[i].assign(gts_per_image[i].size(), false);

  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (const auto& e : entries) {
    const auto& gts = gts_per_image[e.image];
    double best_iou = 0.0;
    int64_t best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[e.image][g]) continue;
      const double iou = mask_iou(preds_per_image[e.image][e.index]->mask, gts[g]->mask);
      if (iou >= iou_threshold && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int64_t>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[e.image][static_cast<size_t>(best_gt)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double target = static_cast<double>(r) / 100.0;
    double best = 0.0;
    for (size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= target) best = std::max(best, precision[k]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace

APResult mask_ap(const std::vector<std::vector<EvalInstance>>& gts,
                 const std::vector<std::vector<EvalInstance>>& preds,
                 const std::vector<std::string>& categories) {
  if (gts.size() != preds.size())
    throw std::invalid_argument("mask_ap: gts and preds must have one entry per image");
  APResult result;
  double ap_sum = 0.0, ap50_sum = 0.0;
  int64_t evaluated = 0;
  for (const auto& category : categories) {
    std::vector<std::vector<const EvalInstance*>> cat_gts(gts.size()), cat_preds(preds.size());
    int64_t n_gt = 0;
    for (size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i])
        if (g.category_key == category) {
          cat_gts[i].push_back(&g);
          ++n_gt;
        }
      for (const auto& p : preds[i])
        if (p.category_key == category) cat_preds[i].push_back(&p);
    }
    if (n_gt == 0) {
      result.skipped.push_back(category);
      continue;
    }
    double mean_ap = 0.0, ap50 = 0.0;
    for (int t = 0; t < kThresholds; ++t) {
      const double ap = category_ap(cat_gts, cat_preds, threshold_at(t), n_gt);
      mean_ap += ap;
      if (t == 0) ap50 = ap;
    }
    mean_ap /= kThresholds;
    result.per_category[category] = mean_ap;
    ap_sum += mean_ap;
    ap50_sum += ap50;
    ++evaluated;
  }
  if (evaluated > 0) {
    result.ap = ap_sum / static_cast<double>(evaluated);
    result.ap50 = ap50_sum / static_cast<double>(evaluated);
  }
  return result;
}

MIoUResult semantic_miou(const std::vector<std::vector<EvalInstance>>& gts,
                         const std::vector<std::vector<EvalInstance>>& preds,
                         const std::vector<std::string>& categories, double score_threshold) {
  if (gts.size() != preds.size())
    throw std::invalid_argument("semantic_miou: gts and preds must have one entry per image");
  MIoUResult result;
  double sum = 0.0;
  int64_t evaluated = 0;
  for (const auto& category : categories) {
    double inter = 0.0, uni = 0.0;
    bool any = false;
    for (size_t i = 0; i < gts.size(); ++i) {
      torch::Tensor gt_union, pred_union;
      for (const auto& g : gts[i])
        if (g.category_key == category)
          gt_union = gt_union.defined() ? (gt_union | g.mask) : g.mask.clone();
      for (const auto& p : preds[i])
        if (p.category_key == category && p.score >= score_threshold)
          pred_union = pred_union.defined() ? (pred_union | p.mask) : p.mask.clone();
      if (!gt_union.defined() && !pred_union.defined()) continue;
      any = true;
      if (gt_union.defined() && pred_union.defined()) {
        inter += (gt_union & pred_union).sum().item<int64_t>();
        uni += (gt_union | pred_union).sum().item<int64_t>();
      } else if (gt_union.defined()) {
        uni += gt_union.sum().item<int64_t>();
      } else {
        uni += pred_union.sum().item<int64_t>();
      }
    }
    if (!any) continue;
    const double iou = uni > 0.0 ? inter / uni : 0.0;
    result.per_category[category] = iou;
    sum += iou;
    ++evaluated;
  }
  if (evaluated > 0) result.miou = sum / static_cast<double>(evaluated);
  return result;
}

double hiou(double miou_seen, double miou_unseen) {
  if (miou_seen < 0.0 || miou_unseen < 0.0)
    throw std::invalid_argument("hiou: mIoU values must be nonnegative");
  const double denom = miou_seen + miou_unseen;
  if (denom == 0.0) return 0.0;
  return 2.0 * miou_seen * miou_unseen / denom;
}

double attention_score(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.sizes() != b.sizes())
    throw std::invalid_argument("attention_score expects two (n, d) tensors of equal shape");
  if (a.size(0) == 0) throw std::invalid_argument("attention_score: empty pair set");
  auto af = a.to(torch::kFloat64);
  auto bf = b.to(torch::kFloat64);
  auto cos = torch::cosine_similarity(af, bf, /*dim=*/1, /*eps=*/1e-12);
  return ((1.0 + cos) / 2.0).mean().item<double>();
}

std::vector<EvalInstance> to_eval_instances(const PredictionSet& preds,
                                            const std::vector<std::string>& categories,
                                            int64_t height, int64_t width) {
  std::vector<EvalInstance> out;
  const int64_t n = preds.size();
  if (n == 0) return out;
  if (preds.class_logits.size(1) != static_cast<int64_t>(categories.size()))
    throw std::invalid_argument("to_eval_instances: category list does not match logits width");

  auto probs = torch::sigmoid(preds.class_logits.to(torch::kFloat64));
  auto best = probs.max(1);
  auto masks = torch::nn::functional::interpolate(
                   preds.mask_logits.unsqueeze(0),
                   torch::nn::functional::InterpolateFuncOptions()
                       .size(std::vector<int64_t>{height, width})
                       .mode(torch::kBilinear)
                       .align_corners(false))
                   .squeeze(0) > 0;
  for (int64_t i = 0; i < n; ++i) {
    EvalInstance inst;
    inst.score = std::get<0>(best)[i].item<double>();
    inst.category_key = categories[static_cast<size_t>(std::get<1>(best)[i].item<int64_t>())];
    inst.mask = masks[i];
    out.push_back(std::move(inst));
  }
  return out;
}

MetricReport evaluate_model(HopsegModel& model, const std::vector<SceneSample>& samples,
                            const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table) {
  torch::NoGradGuard no_grad;
  model->eval();
  MetricReport report;
  report.n_images = static_cast<int64_t>(samples.size());

  const auto object_categories = taxonomy.objects;
  const auto part_categories = taxonomy.all_part_keys();

  std::vector<std::vector<EvalInstance>> object_gts, object_preds, part_gts, part_preds;
  std::vector<torch::Tensor> attn_a, attn_b;

  for (const auto& sample : samples) {
    const int64_t h = sample.image.size(1), w = sample.image.size(2);
    auto inference = model->infer(sample.image, taxonomy, table);

    std::vector<EvalInstance> ogt, pgt;
    for (const auto& inst : sample.instances) {
      EvalInstance e;
      e.category_key = inst.category_key;
      e.mask = inst.mask;
      (inst.level == QueryLevel::object ? ogt : pgt).push_back(std::move(e));
    }
    auto opred = to_eval_instances(inference.objects.predictions, object_categories, h, w);
    // only retained object queries count as detections
    std::vector<EvalInstance> retained;
    for (int64_t row : inference.retained_rows) retained.push_back(opred[static_cast<size_t>(row)]);
    auto ppred = part_categories.empty()
                     ? std::vector<EvalInstance>{}
                     : to_eval_instances(inference.parts.predictions, part_categories, h, w);

    // attention pairs: each GT part against its best-overlapping prediction
    if (!ppred.empty() && !pgt.empty()) {
      auto embed = model->part_decoder()->mask_embed(inference.parts.decoded.embeddings);
      auto features = inference.objects.features.mask_features.to(torch::kFloat64);
      for (const auto& gt : pgt) {
        double best_iou = 0.0;
        int64_t best = -1;
        for (size_t k = 0; k < ppred.size(); ++k) {
          const double iou = mask_iou(ppred[k].mask, gt.mask);
          if (iou >= 0.5 && iou > best_iou) {
            best_iou = iou;
            best = static_cast<int64_t>(k);
          }
        }
        if (best < 0) continue;
        auto gt4 = torch::nn::functional::avg_pool2d(
                       gt.mask.to(torch::kFloat64).unsqueeze(0),
                       torch::nn::functional::AvgPool2dFuncOptions(4))
                       .squeeze(0);
        const double total = gt4.sum().item<double>();
        if (total <= 0.0) continue;
        auto pooled = torch::einsum("dhw,hw->d", {features, gt4}) / total;
        attn_a.push_back(embed[best].to(torch::kFloat64));
        attn_b.push_back(pooled);
      }
    }

    object_gts.push_back(std::move(ogt));
    object_preds.push_back(std::move(retained));
    part_gts.push_back(std::move(pgt));
    part_preds.push_back(std::move(ppred));
  }

  report.object_ap = mask_ap(object_gts, object_preds, object_categories);
  report.part_ap = mask_ap(part_gts, part_preds, part_categories);
  report.object_miou = semantic_miou(object_gts, object_preds, object_categories);
  report.part_miou = semantic_miou(part_gts, part_preds, part_categories);

  double seen_sum = 0.0, unseen_sum = 0.0;
  int64_t seen_n = 0, unseen_n = 0;
  for (const auto& [category, iou] : report.part_miou.per_category) {
    if (taxonomy.seen_flags.count(category) && !taxonomy.is_seen(category)) {
      unseen_sum += iou;
      ++unseen_n;
    } else {
      seen_sum += iou;
      ++seen_n;
    }
  }
  report.miou_seen = seen_n ? seen_sum / static_cast<double>(seen_n) : 0.0;
  report.miou_unseen = unseen_n ? unseen_sum / static_cast<double>(unseen_n) : 0.0;
  report.hiou_value = hiou(report.miou_seen, report.miou_unseen);

  if (!attn_a.empty())
    report.attention = attention_score(torch::stack(attn_a), torch::stack(attn_b));
  return report;
}

ordered_json report_to_json(const MetricReport& report) {
  auto ap_json = [](const APResult& ap) {
    return ordered_json{{"ap", ap.ap},
                        {"ap50", ap.ap50},
                        {"per_category", ap.per_category},
                        {"skipped_categories", ap.skipped}};
  };
  auto miou_json = [](const MIoUResult& m) {
    return ordered_json{{"miou", m.miou}, {"per_category", m.per_category}};
  };
  return ordered_json{{"n_images", report.n_images},
                      {"object_ap", ap_json(report.object_ap)},
                      {"part_ap", ap_json(report.part_ap)},
                      {"object_miou", miou_json(report.object_miou)},
                      {"part_miou", miou_json(report.part_miou)},
                      {"miou_seen", report.miou_seen},
                      {"miou_unseen", report.miou_unseen},
                      {"hiou", report.hiou_value},
                      {"attention_score", report.attention}};
}

void write_report_csv(const MetricReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open report CSV for writing: " + path);
  out << "metric,value\n";
  out << "object_ap," << report.object_ap.ap << "\n";
  out << "object_ap50," << report.object_ap.ap50 << "\n";
  out << "part_ap," << report.part_ap.ap << "\n";
  out << "part_ap50," << report.part_ap.ap50 << "\n";
  out << "object_miou," << report.object_miou.miou << "\n";
  out << "part_miou," << report.part_miou.miou << "\n";
  out << "miou_seen," << report.miou_seen << "\n";
  out << "miou_unseen," << report.miou_unseen << "\n";
  out << "hiou," << report.hiou_value << "\n";
  out << "attention_score," << report.attention << "\n";
  out << "n_images," << report.n_images << "\n";
}

std::vector<SweepPoint> fraction_sweep(HopsegModel& model, const std::vector<SceneSample>& samples,
                                       const CategoryTaxonomy& taxonomy,
                                       const TextEmbeddingTable& table, PerturbKind kind,
                                       const std::vector<double>& fractions, uint64_t seed) {
  if (kind != PerturbKind::synonym_replace && kind != PerturbKind::hierarchy_replace)
    throw std::invalid_argument("fraction_sweep applies to the replace perturbations only");
  std::vector<SweepPoint> points;
  for (double fraction : fractions) {
    auto [ptax, ptable] = perturb(taxonomy, table, {kind, fraction, seed});
    SweepPoint point;
    point.fraction = fraction;
    point.seed = seed;
    point.report = evaluate_model(model, samples, ptax, ptable);
    points.push_back(std::move(point));
  }
  return points;
}

std::vector<SweepPoint> shuffle_trials(HopsegModel& model, const std::vector<SceneSample>& samples,
                                       const CategoryTaxonomy& taxonomy,
                                       const TextEmbeddingTable& table, PerturbKind kind,
                                       int64_t n_trials, uint64_t seed) {
  if (kind != PerturbKind::shuffle_objects && kind != PerturbKind::shuffle_parts)
    throw std::invalid_argument("shuffle_trials applies to the shuffle perturbations only");
  if (n_trials < 1) throw std::invalid_argument("shuffle_trials: n_trials must be >= 1");
  std::vector<SweepPoint> points;
  for (int64_t t = 0; t < n_trials; ++t) {
    const uint64_t trial_seed = mix_seeds(seed, static_cast<uint64_t>(t));
    auto [ptax, ptable] = perturb(taxonomy, table, {kind, 1.0, trial_seed});
    SweepPoint point;
    point.fraction = 1.0;
    point.seed = trial_seed;
    point.report = evaluate_model(model, samples, ptax, ptable);
    points.push_back(std::move(point));
  }
  return points;
}

}  // namespace hopseg
