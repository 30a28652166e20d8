#pragma once

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hopseg/data.hpp"
#include "hopseg/losses.hpp"
#include "hopseg/matcher.hpp"
#include "hopseg/model.hpp"

namespace hopseg {

// Ground truth of one scene in training form.
struct SceneTargets {
  std::vector<int64_t> object_class;  // index into taxonomy.objects
  torch::Tensor object_boxes;         // (m, 4) cxcywh
  torch::Tensor object_masks4;        // (m, H/4, W/4) float {0,1}

  struct PartGT {
    int64_t object = -1;  // index into the scene's GT object list
    std::string key;      // part category key
    int64_t class_index = -1;  // index into taxonomy.all_part_keys()
    std::array<double, 4> bbox{};
    torch::Tensor mask4;  // (H/4, W/4) float {0,1}
  };
  std::vector<PartGT> parts;
};

// Throws LookupError when the scene references categories outside the taxonomy.
SceneTargets build_targets(const SceneSample& sample, const CategoryTaxonomy& taxonomy);

// Weighted matching cost (classification + box L1 + mask focal/dice), computed
// without gradients. Rows are predictions, columns ground-truth instances.
std::vector<std::vector<double>> match_cost(const PredictionSet& preds,
                                            const std::vector<int64_t>& gt_class,
                                            const torch::Tensor& gt_boxes,
                                            const torch::Tensor& gt_masks4,
                                            const LossWeights& weights);

struct StepLosses {
  torch::Tensor total;
  double cls = 0.0, bbox = 0.0, mask = 0.0;
};

MatchResult match_objects(const PredictionSet& preds, const SceneTargets& targets,
                          const LossWeights& weights);

StepLosses object_losses(const PredictionSet& preds, const SceneTargets& targets,
                         const MatchResult& match, const LossWeights& weights);

// Auxiliary seeding loss: focal loss over per-location objectness logits with
// "cell center inside a ground-truth object box" positives, normalized by the
// positive count. Keeps the top-N query seeding on object evidence.
torch::Tensor objectness_loss(const torch::Tensor& scores, const torch::Tensor& centers,
                              const torch::Tensor& gt_boxes);

// Part losses with per-(object, part-key) group matching; for the
// no_hierarchy parser mode the grouping falls back to per-object. Unmatched
// repeat rows are supervised as background unless disabled.
StepLosses part_losses(const PredictionSet& preds, const SceneTargets& targets,
                       const LossWeights& weights, bool group_by_key,
                       bool background_for_unmatched);

struct TrainOptions {
  int64_t epochs = 24;
  int64_t stage1_epochs = 8;  // object-only warm-up; 0 with two_stage=false
  bool two_stage = true;
  double lr = 1e-3;
  LossWeights weights;
  double objectness_weight = 2.0;
  bool background_for_unmatched = true;
  uint64_t seed = 0;
};

struct StepLog {
  int64_t step = 0;
  int64_t epoch = 0;
  int stage = 1;
  double loss = 0.0, cls = 0.0, bbox = 0.0, mask = 0.0, objectness = 0.0;
};

// Stage 1 trains the object path alone; stage 2 adds the hierarchy-driven
// part path (with teacher-forced object categories). One-stage training runs
// the joint objective from the first step.
std::vector<StepLog> train_model(HopsegModel& model, const std::vector<SceneSample>& samples,
                                 const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table,
                                 const TrainOptions& options);

void write_loss_csv(const std::vector<StepLog>& log, const std::string& path);

}  // namespace hopseg
