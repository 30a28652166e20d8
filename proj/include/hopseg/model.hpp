#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "hopseg/backbone.hpp"
#include "hopseg/decoder.hpp"
#include "hopseg/parser.hpp"
#include "hopseg/taxonomy.hpp"

namespace hopseg {

struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  ParserConfig parser;
  int64_t n_object_queries = 20;  // N
  int64_t n_part_repeats = 3;     // N_p
  double confidence_threshold = 0.3;
  // ablation: cut the gradient path from part losses into the object queries
  bool detach_object_queries = false;
};

ordered_json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const ordered_json& doc);

struct ObjectOutputs {
  MultiScaleFeatures features;
  QuerySet queries;  // O^L after the full object decoder stack
  PredictionSet predictions;
};

struct PartOutputs {
  QuerySet initial;  // p^0 in canonical provenance order
  QuerySet refined;  // after the parser (identity pass-through for no_hierarchy)
  QuerySet decoded;  // after the part decoder
  PredictionSet predictions;
};

struct SceneInference {
  ObjectOutputs objects;
  std::vector<int64_t> retained_rows;          // row indices into objects.queries
  std::vector<std::string> retained_categories;
  PartOutputs parts;
};

// Full pipeline: shared backbone, object decoder, hierarchy-driven part query
// construction, parser refinement, part decoder. The two decoders share code
// but not parameters.
class HopsegModelImpl : public torch::nn::Module {
 public:
  explicit HopsegModelImpl(ModelConfig config = {});

  ObjectOutputs forward_objects(const torch::Tensor& image,
                                const torch::Tensor& object_class_embeddings);

  // `rows` selects the retained object queries; `categories` gives one object
  // category per retained row (ground truth during training, argmax at
  // inference). Part queries are canonically sorted by provenance.
  PartOutputs forward_parts(const ObjectOutputs& objects, const std::vector<int64_t>& rows,
                            const std::vector<std::string>& categories,
                            const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table,
                            const torch::Tensor& part_class_embeddings);

  // Retention by class confidence, then the part pass with predicted categories.
  SceneInference infer(const torch::Tensor& image, const CategoryTaxonomy& taxonomy,
                       const TextEmbeddingTable& table);

  const ModelConfig& config() const { return config_; }
  Backbone backbone() { return backbone_; }
  QueryDecoder object_decoder() { return object_decoder_; }
  QueryDecoder part_decoder() { return part_decoder_; }
  PartQueryBuilder part_query_builder() { return builder_; }

 private:
  ModelConfig config_;
  Backbone backbone_{nullptr};
  QueryDecoder object_decoder_{nullptr}, part_decoder_{nullptr};
  PartQueryBuilder builder_{nullptr};
  PromptParser prompt_parser_{nullptr};
  QFormerParser qformer_parser_{nullptr};
  NoHierarchyInit no_hierarchy_{nullptr};
};
TORCH_MODULE(HopsegModel);

// Checkpoint directory: model.pt (parameter archive) + config.json (model
// configuration plus caller-provided metadata under "extra").
void save_checkpoint(HopsegModel& model, const ordered_json& extra, const std::string& dir);
std::pair<HopsegModel, ordered_json> load_checkpoint(const std::string& dir);

}  // namespace hopseg
