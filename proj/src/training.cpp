#include "hopseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace hopseg {

namespace {

torch::Tensor downsample_mask(const torch::Tensor& mask) {
  auto pooled = torch::nn::functional::avg_pool2d(
                    mask.to(torch::kFloat32).unsqueeze(0),
                    torch::nn::functional::AvgPool2dFuncOptions(4))
                    .squeeze(0);
  return (pooled >= 0.5).to(torch::kFloat32);
}

torch::Tensor zero_scalar() { return torch::zeros({}, torch::kFloat32); }

}  // namespace

SceneTargets build_targets(const SceneSample& sample, const CategoryTaxonomy& taxonomy) {
  SceneTargets targets;
  const auto part_keys = taxonomy.all_part_keys();
  std::map<std::string, int64_t> part_index;
  for (size_t i = 0; i < part_keys.size(); ++i) part_index[part_keys[i]] = static_cast<int64_t>(i);

  std::map<int64_t, int64_t> object_position;  // instance id -> GT object index
  std::vector<torch::Tensor> boxes, masks;
  for (const auto& inst : sample.instances) {
    if (inst.level == QueryLevel::object) {
      auto it = std::find(taxonomy.objects.begin(), taxonomy.objects.end(), inst.category_key);
      if (it == taxonomy.objects.end())
        throw LookupError("scene object category outside the taxonomy: '" + inst.category_key + "'");
      object_position[inst.instance_id] = static_cast<int64_t>(targets.object_class.size());
      targets.object_class.push_back(it - taxonomy.objects.begin());
      boxes.push_back(torch::tensor({inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3]},
                                    torch::kFloat32));
      masks.push_back(downsample_mask(inst.mask));
    } else {
      auto parent = object_position.find(inst.parent_id);
      if (parent == object_position.end())
        throw ValidationError("part instance " + std::to_string(inst.instance_id) +
                              " precedes or lacks its parent object");
      auto key = part_index.find(inst.category_key);
      if (key == part_index.end())
        throw LookupError("scene part category outside the taxonomy: '" + inst.category_key + "'");
      SceneTargets::PartGT part;
      part.object = parent->second;
      part.key = inst.category_key;
      part.class_index = key->second;
      part.bbox = inst.bbox;
      part.mask4 = downsample_mask(inst.mask);
      targets.parts.push_back(std::move(part));
    }
  }
  targets.object_boxes = boxes.empty() ? torch::zeros({0, 4}, torch::kFloat32) : torch::stack(boxes);
  targets.object_masks4 = masks.empty() ? torch::Tensor() : torch::stack(masks);
  return targets;
}

std::vector<std::vector<double>> match_cost(const PredictionSet& preds,
                                            const std::vector<int64_t>& gt_class,
                                            const torch::Tensor& gt_boxes,
                                            const torch::Tensor& gt_masks4,
                                            const LossWeights& weights) {
  torch::NoGradGuard no_grad;
  const int64_t n = preds.size();
  const int64_t m = static_cast<int64_t>(gt_class.size());
  std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(m), 0.0));
  if (n == 0 || m == 0) return cost;

  const double gamma = 2.0, alpha = 0.25, eps = 1e-8;
  auto probs = torch::sigmoid(preds.class_logits.to(torch::kFloat64));
  auto boxes = preds.boxes.to(torch::kFloat64);
  auto mask_logits = preds.mask_logits.to(torch::kFloat64);
  auto gt_boxes64 = gt_boxes.to(torch::kFloat64);
  auto gt_masks64 = gt_masks4.to(torch::kFloat64);

  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      const double p = probs[i][gt_class[static_cast<size_t>(j)]].item<double>();
      const double pos = alpha * std::pow(1.0 - p, gamma) * (-std::log(p + eps));
      const double neg = (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - p + eps));
      const double cls = pos - neg;

      const double bbox = (boxes[i] - gt_boxes64[j]).abs().mean().item<double>();

      auto logits = mask_logits[i];
      auto target = gt_masks64[j];
      auto q = torch::sigmoid(logits);
      const double focal_mean = (alpha * (1.0 - q).pow(gamma) * (-torch::log(q + eps)) * target +
                                 (1.0 - alpha) * q.pow(gamma) * (-torch::log(1.0 - q + eps)) * (1.0 - target))
                                    .mean()
                                    .item<double>();
      const double inter = (q * target).sum().item<double>();
      const double dice = 1.0 - (2.0 * inter + 1.0) / (q.sum().item<double>() + target.sum().item<double>() + 1.0);

      cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          weights.cls * cls + weights.bbox * bbox + weights.mask * (focal_mean + dice);
    }
  }
  return cost;
}

MatchResult match_objects(const PredictionSet& preds, const SceneTargets& targets,
                          const LossWeights& weights) {
  if (targets.object_class.empty()) return {};
  return hungarian_match(
      match_cost(preds, targets.object_class, targets.object_boxes, targets.object_masks4, weights));
}

StepLosses object_losses(const PredictionSet& preds, const SceneTargets& targets,
                         const MatchResult& match, const LossWeights& weights) {
  StepLosses losses;
  auto cls_targets = torch::zeros_like(preds.class_logits);
  std::vector<int64_t> pred_rows, gt_rows;
  for (const auto& [pred, gt] : match.assignment) {
    cls_targets[pred][targets.object_class[static_cast<size_t>(gt)]] = 1.0;
    pred_rows.push_back(pred);
    gt_rows.push_back(gt);
  }
  // focal loss summed over all logits, normalized by the matched count so the
  // few positive entries are not drowned by the background cells
  auto cls = focal_loss(preds.class_logits, cls_targets) *
             (static_cast<double>(preds.class_logits.numel()) /
              static_cast<double>(std::max<size_t>(pred_rows.size(), 1)));
  torch::Tensor bbox = zero_scalar(), mask = zero_scalar();
  if (!pred_rows.empty()) {
    auto pidx = torch::tensor(pred_rows, torch::kLong);
    auto gidx = torch::tensor(gt_rows, torch::kLong);
    bbox = box_l1_loss(preds.boxes.index_select(0, pidx), targets.object_boxes.index_select(0, gidx));
    mask = mask_loss(preds.mask_logits.index_select(0, pidx),
                     targets.object_masks4.index_select(0, gidx));
  }
  losses.cls = cls.item<double>();
  losses.bbox = bbox.item<double>();
  losses.mask = mask.item<double>();
  losses.total = weights.cls * cls + weights.bbox * bbox + weights.mask * mask;
  return losses;
}

torch::Tensor objectness_loss(const torch::Tensor& scores, const torch::Tensor& centers,
                              const torch::Tensor& gt_boxes) {
  if (scores.size(0) != centers.size(0))
    throw std::invalid_argument("objectness_loss: one center per score required");
  auto targets = torch::zeros_like(scores);
  int64_t positives = 0;
  if (gt_boxes.defined() && gt_boxes.size(0) > 0) {
    auto cx = centers.select(1, 0).unsqueeze(1);  // (M, 1)
    auto cy = centers.select(1, 1).unsqueeze(1);
    auto b = gt_boxes.to(centers.dtype());
    auto inside = (cx - b.select(1, 0).unsqueeze(0)).abs() <= b.select(1, 2).unsqueeze(0) / 2;
    inside = inside &
             ((cy - b.select(1, 1).unsqueeze(0)).abs() <= b.select(1, 3).unsqueeze(0) / 2);
    targets = std::get<0>(inside.max(1)).to(scores.dtype());
    positives = targets.sum().item<int64_t>();
  }
  return focal_loss(scores, targets) *
         (static_cast<double>(scores.numel()) / static_cast<double>(std::max<int64_t>(positives, 1)));
}

StepLosses part_losses(const PredictionSet& preds, const SceneTargets& targets,
                       const LossWeights& weights, bool group_by_key,
                       bool background_for_unmatched) {
  StepLosses losses;
  const int64_t n = preds.size();

  // prediction rows per group
  std::map<std::pair<int64_t, std::string>, std::vector<int64_t>> groups;
  for (int64_t i = 0; i < n; ++i) {
    const auto& prov = preds.provenance[static_cast<size_t>(i)];
    groups[{prov.object_index, group_by_key ? prov.part_key : std::string()}].push_back(i);
  }
  // ground truth per group
  std::map<std::pair<int64_t, std::string>, std::vector<int64_t>> gt_groups;
  for (size_t j = 0; j < targets.parts.size(); ++j) {
    const auto& part = targets.parts[j];
    gt_groups[{part.object, group_by_key ? part.key : std::string()}].push_back(
        static_cast<int64_t>(j));
  }

  std::vector<int64_t> pred_rows, gt_rows;  // global matched pairs
  for (const auto& [key, rows] : groups) {
    auto it = gt_groups.find(key);
    if (it == gt_groups.end()) continue;
    const auto& gts = it->second;

    PredictionSet sub;
    sub.level = preds.level;
    auto ridx = torch::tensor(rows, torch::kLong);
    sub.boxes = preds.boxes.index_select(0, ridx);
    sub.class_logits = preds.class_logits.index_select(0, ridx);
    sub.mask_logits = preds.mask_logits.index_select(0, ridx);

    std::vector<int64_t> sub_class;
    std::vector<torch::Tensor> sub_boxes, sub_masks;
    for (int64_t j : gts) {
      const auto& part = targets.parts[static_cast<size_t>(j)];
      sub_class.push_back(part.class_index);
      sub_boxes.push_back(torch::tensor({part.bbox[0], part.bbox[1], part.bbox[2], part.bbox[3]},
                                        torch::kFloat32));
      sub_masks.push_back(part.mask4);
    }
    auto match = hungarian_match(
        match_cost(sub, sub_class, torch::stack(sub_boxes), torch::stack(sub_masks), weights));
    for (const auto& [local_pred, local_gt] : match.assignment) {
      pred_rows.push_back(rows[static_cast<size_t>(local_pred)]);
      gt_rows.push_back(gts[static_cast<size_t>(local_gt)]);
    }
  }

  auto cls_targets = torch::zeros_like(preds.class_logits);
  for (size_t k = 0; k < pred_rows.size(); ++k)
    cls_targets[pred_rows[k]][targets.parts[static_cast<size_t>(gt_rows[k])].class_index] = 1.0;

  const double norm = static_cast<double>(std::max<size_t>(pred_rows.size(), 1));
  torch::Tensor cls;
  if (background_for_unmatched || pred_rows.empty()) {
    cls = n > 0 ? focal_loss(preds.class_logits, cls_targets) *
                      (static_cast<double>(preds.class_logits.numel()) / norm)
                : zero_scalar();
  } else {
    auto pidx = torch::tensor(pred_rows, torch::kLong);
    auto selected = preds.class_logits.index_select(0, pidx);
    cls = focal_loss(selected, cls_targets.index_select(0, pidx)) *
          (static_cast<double>(selected.numel()) / norm);
  }

  torch::Tensor bbox = zero_scalar(), mask = zero_scalar();
  if (!pred_rows.empty()) {
    auto pidx = torch::tensor(pred_rows, torch::kLong);
    std::vector<torch::Tensor> gt_boxes, gt_masks;
    for (int64_t j : gt_rows) {
      const auto& part = targets.parts[static_cast<size_t>(j)];
      gt_boxes.push_back(torch::tensor({part.bbox[0], part.bbox[1], part.bbox[2], part.bbox[3]},
                                       torch::kFloat32));
      gt_masks.push_back(part.mask4);
    }
    bbox = box_l1_loss(preds.boxes.index_select(0, pidx), torch::stack(gt_boxes));
    mask = mask_loss(preds.mask_logits.index_select(0, pidx), torch::stack(gt_masks));
  }

  losses.cls = cls.item<double>();
  losses.bbox = bbox.item<double>();
  losses.mask = mask.item<double>();
  losses.total = weights.cls * cls + weights.bbox * bbox + weights.mask * mask;
  return losses;
}

std::vector<StepLog> train_model(HopsegModel& model, const std::vector<SceneSample>& samples,
                                 const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table,
                                 const TrainOptions& options) {
  if (samples.empty()) throw std::invalid_argument("train_model: empty training set");
  if (options.epochs < 1) throw std::invalid_argument("train_model: epochs must be >= 1");
  if (options.two_stage && (options.stage1_epochs < 0 || options.stage1_epochs > options.epochs))
    throw std::invalid_argument("train_model: stage1_epochs must lie within [0, epochs]");

  model->train();
  auto object_embeddings = encode_categories(table, taxonomy.objects);
  const auto part_keys = taxonomy.all_part_keys();
  auto part_embeddings = part_keys.empty() ? torch::empty({0, table.dim()}, torch::kFloat32)
                                           : encode_categories(table, part_keys);
  const bool group_by_key = model->config().parser.mode != ParserMode::no_hierarchy;

  std::vector<SceneTargets> targets;
  targets.reserve(samples.size());
  for (const auto& sample : samples) targets.push_back(build_targets(sample, taxonomy));

  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(options.lr));
  std::vector<StepLog> log;
  int64_t step = 0;
  const int64_t stage1_epochs = options.two_stage ? options.stage1_epochs : 0;

  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    const int stage = epoch < stage1_epochs ? 1 : 2;
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seeds(options.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    for (size_t idx : order) {
      const auto& sample = samples[idx];
      const auto& target = targets[idx];

      optimizer.zero_grad();
      auto objects = model->forward_objects(sample.image, object_embeddings);
      auto match = match_objects(objects.predictions, target, options.weights);
      auto obj = object_losses(objects.predictions, target, match, options.weights);
      auto seeding = objectness_loss(model->object_decoder()->objectness_scores(objects.features),
                                     level_centers(objects.features), target.object_boxes);

      StepLog entry;
      entry.step = ++step;
      entry.epoch = epoch;
      entry.stage = stage;
      auto total = obj.total + options.objectness_weight * seeding;
      entry.cls = obj.cls;
      entry.bbox = obj.bbox;
      entry.mask = obj.mask;
      entry.objectness = seeding.item<double>();

      if (stage == 2 && !target.object_class.empty()) {
        // teacher forcing: matched query rows keep their ground-truth category
        std::vector<int64_t> rows(target.object_class.size(), -1);
        for (const auto& [pred, gt] : match.assignment) rows[static_cast<size_t>(gt)] = pred;
        std::vector<int64_t> retained_rows;
        std::vector<std::string> categories;
        std::vector<int64_t> gt_remap(target.object_class.size(), -1);
        for (size_t j = 0; j < rows.size(); ++j) {
          if (rows[j] < 0) continue;  // more GT objects than queries (diagnosed by the matcher)
          gt_remap[j] = static_cast<int64_t>(retained_rows.size());
          retained_rows.push_back(rows[j]);
          categories.push_back(taxonomy.objects[static_cast<size_t>(
              target.object_class[j])]);
        }
        SceneTargets part_target = target;
        part_target.parts.clear();
        for (const auto& part : target.parts) {
          if (gt_remap[static_cast<size_t>(part.object)] < 0) continue;
          auto remapped = part;
          remapped.object = gt_remap[static_cast<size_t>(part.object)];
          part_target.parts.push_back(std::move(remapped));
        }

        auto parts = model->forward_parts(objects, retained_rows, categories, taxonomy, table,
                                          part_embeddings);
        auto part = part_losses(parts.predictions, part_target, options.weights, group_by_key,
                                options.background_for_unmatched);
        total = total + part.total;
        entry.cls += part.cls;
        entry.bbox += part.bbox;
        entry.mask += part.mask;
      }

      total.backward();
      optimizer.step();
      entry.loss = total.item<double>();
      log.push_back(entry);
    }
  }
  return log;
}

void write_loss_csv(const std::vector<StepLog>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open loss CSV for writing: " + path);
  out << "step,epoch,stage,loss,cls,bbox,mask,objectness\n";
  for (const auto& entry : log)
    out << entry.step << "," << entry.epoch << "," << entry.stage << "," << entry.loss << ","
        << entry.cls << "," << entry.bbox << "," << entry.mask << "," << entry.objectness << "\n";
}

}  // namespace hopseg
