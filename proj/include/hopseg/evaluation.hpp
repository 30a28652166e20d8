#pragma once

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hopseg/data.hpp"
#include "hopseg/model.hpp"
#include "hopseg/taxonomy.hpp"

namespace hopseg {

// One ground-truth or predicted instance in evaluation form.
struct EvalInstance {
  std::string category_key;
  torch::Tensor mask;  // bool (H, W)
  double score = 1.0;  // predictions only
};

struct APResult {
  double ap = 0.0;    // mean over IoU thresholds 0.50:0.05:0.95 and categories
  double ap50 = 0.0;  // IoU threshold 0.50 only
  std::map<std::string, double> per_category;  // mean over thresholds
  std::vector<std::string> skipped;  // categories without ground truth (logged, not averaged)
};

// COCO-style mask AP with 101-point precision interpolation. `gts` and
// `preds` are parallel per-image instance lists; categories are evaluated in
// the order given.
APResult mask_ap(const std::vector<std::vector<EvalInstance>>& gts,
                 const std::vector<std::vector<EvalInstance>>& preds,
                 const std::vector<std::string>& categories);

struct MIoUResult {
  double miou = 0.0;
  std::map<std::string, double> per_category;
};

// Semantic projection: per category, the unions of GT and of sufficiently
// confident predicted masks are compared by IoU; categories absent from both
// sides are skipped.
MIoUResult semantic_miou(const std::vector<std::vector<EvalInstance>>& gts,
                         const std::vector<std::vector<EvalInstance>>& preds,
                         const std::vector<std::string>& categories,
                         double score_threshold = 0.5);

// Harmonic seen/unseen mIoU; 0 when either side is 0.
double hiou(double miou_seen, double miou_unseen);

// Mean of (1 + cos(a_i, b_i)) / 2 over matched row pairs.
double attention_score(const torch::Tensor& a, const torch::Tensor& b);

// Converts raw predictions (mask logits at stride 4) to full-resolution
// evaluation instances; category and score via per-row argmax.
std::vector<EvalInstance> to_eval_instances(const PredictionSet& preds,
                                            const std::vector<std::string>& categories,
                                            int64_t height, int64_t width);

struct MetricReport {
  APResult object_ap, part_ap;
  MIoUResult object_miou, part_miou;
  double miou_seen = 0.0, miou_unseen = 0.0, hiou_value = 0.0;
  double attention = 0.0;  // mean attention score over matched part pairs
  int64_t n_images = 0;
};

MetricReport evaluate_model(HopsegModel& model, const std::vector<SceneSample>& samples,
                            const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table);

ordered_json report_to_json(const MetricReport& report);
void write_report_csv(const MetricReport& report, const std::string& path);

struct SweepPoint {
  double fraction = 0.0;
  uint64_t seed = 0;
  MetricReport report;
};

// synonym_replace / hierarchy_replace: sweep over replacement fractions at a
// fixed seed. fraction 0 must reproduce the unperturbed evaluation bit for bit.
std::vector<SweepPoint> fraction_sweep(HopsegModel& model, const std::vector<SceneSample>& samples,
                                       const CategoryTaxonomy& taxonomy,
                                       const TextEmbeddingTable& table, PerturbKind kind,
                                       const std::vector<double>& fractions, uint64_t seed);

// shuffle_objects / shuffle_parts: repeated trials under different shuffle
// seeds; listing order must not affect any metric.
std::vector<SweepPoint> shuffle_trials(HopsegModel& model, const std::vector<SceneSample>& samples,
                                       const CategoryTaxonomy& taxonomy,
                                       const TextEmbeddingTable& table, PerturbKind kind,
                                       int64_t n_trials, uint64_t seed);

}  // namespace hopseg
