#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "hopseg/backbone.hpp"
#include "hopseg/taxonomy.hpp"

namespace hopseg {

enum class QueryLevel { object, part };

// For part rows: which object query the row belongs to, which part category
// key built it and which repeat copy it is (r in [0, N_p)).
struct PartProvenance {
  int64_t object_index = -1;
  std::string part_key;
  int64_t repeat = 0;
};

struct QuerySet {
  torch::Tensor embeddings;  // (n, D_q) content stream
  // per-query identity embedding, re-added to attention queries/keys at every
  // decoder layer (object queries: location encoding of the seeding feature;
  // part queries: learned repeat-index embedding). May be undefined.
  torch::Tensor positions;
  // (n, 2) normalized (cx, cy) anchor the box head refines around: the seeding
  // location for object queries, the parent object's predicted box center for
  // part queries. Treated as a constant (never carries gradient). May be
  // undefined, in which case boxes are predicted free-standing.
  torch::Tensor reference;
  QueryLevel level = QueryLevel::object;
  std::vector<PartProvenance> provenance;  // size n for parts, empty for objects

  int64_t size() const { return embeddings.defined() ? embeddings.size(0) : 0; }
};

struct PredictionSet {
  torch::Tensor boxes;         // (n, 4) normalized cxcywh in [0,1]
  torch::Tensor class_logits;  // (n, |C_level|)
  torch::Tensor mask_logits;   // (n, H/4, W/4)
  QueryLevel level = QueryLevel::object;
  std::vector<PartProvenance> provenance;

  int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
};

struct DecoderConfig {
  int64_t query_dim = 64;      // D_q
  int64_t embed_dim = 32;      // D_e (text/class embedding width)
  int64_t feature_channels = 32;  // D_s
  int64_t mask_channels = 32;  // D_m
  int64_t heads = 4;
  int64_t layers = 3;          // L (9 reproduces the reference setting)
  int64_t ffn_dim = 128;
  int64_t max_repeats = 8;     // capacity of the repeat-index embedding
};

// Fixed 2D sine position embedding for an (h, w) grid, shape (h*w, dim).
torch::Tensor sine_position_embedding(int64_t h, int64_t w, int64_t dim);

// Normalized (cx, cy) cell centers of every feature location across all
// levels, concatenated in level order; shape (M, 2).
torch::Tensor level_centers(const MultiScaleFeatures& features);

class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim);
  // query_pos is added to attention queries/keys only; values carry content.
  torch::Tensor forward(const torch::Tensor& queries, const torch::Tensor& query_pos,
                        const torch::Tensor& memory, const torch::Tensor& memory_pos);

 private:
  torch::nn::MultiheadAttention cross_attn_{nullptr}, self_attn_{nullptr};
  torch::nn::Linear ffn1_{nullptr}, ffn2_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
};
TORCH_MODULE(DecoderLayer);

// Query decoder: cross-attention over the flattened multi-scale features,
// self-attention among queries, feed-forward; plus the three prediction heads.
// Instantiated twice (object decoder / part decoder) with separate parameters.
class QueryDecoderImpl : public torch::nn::Module {
 public:
  explicit QueryDecoderImpl(DecoderConfig config = {});

  // Top-N objectness selection over the flattened levels; ties broken by
  // ascending flattened index.
  QuerySet init_object_queries(const MultiScaleFeatures& features, int64_t n);

  // Objectness logits for every flattened feature location, shape (M,).
  // Differentiable; trained with an auxiliary location-inside-box loss so the
  // top-N seeding lands on object evidence.
  torch::Tensor objectness_scores(const MultiScaleFeatures& features);

  // layers = -1 runs the full configured stack. Part-level rows use a learned
  // repeat-index embedding as their query identity (symmetry breaking across
  // the N_p copies; provenance is otherwise untouched).
  QuerySet decode(const QuerySet& queries, const MultiScaleFeatures& features, int64_t layers = -1);

  // (n, 4) normalized cxcywh; when queries.reference is defined, the center is
  // predicted as a sigmoid-space offset from the anchor.
  torch::Tensor predict_boxes(const QuerySet& queries);
  torch::Tensor predict_classes(const QuerySet& queries, const torch::Tensor& class_embeddings);
  torch::Tensor predict_masks(const QuerySet& queries, const torch::Tensor& mask_features);
  PredictionSet predict(const QuerySet& queries, const torch::Tensor& class_embeddings,
                        const torch::Tensor& mask_features);

  // f_MO mapping used by both mask prediction and the attention-score metric.
  torch::Tensor mask_embed(const torch::Tensor& queries);

  const DecoderConfig& config() const { return config_; }

 private:
  // (tokens (M, D_s), position encodings (M, D_q)) over all levels.
  std::pair<torch::Tensor, torch::Tensor> flatten_levels(const MultiScaleFeatures& features);

  DecoderConfig config_;
  torch::nn::Linear objectness_head_{nullptr};
  torch::nn::Linear input_proj_{nullptr};
  torch::nn::Embedding level_embedding_{nullptr};
  torch::nn::Embedding repeat_embedding_{nullptr};
  std::vector<DecoderLayer> layers_;
  torch::nn::Sequential box_head_{nullptr};
  torch::nn::Linear class_proj_{nullptr};  // f_CO: D_q -> D_e
  torch::nn::Sequential mask_head_{nullptr};  // f_MO: D_q -> D_m
};
TORCH_MODULE(QueryDecoder);

// Builds initial part queries: concat(object embedding, text projection of the
// part key embedding), compressed back to D_q, repeated N_p times.
class PartQueryBuilderImpl : public torch::nn::Module {
 public:
  PartQueryBuilderImpl(int64_t query_dim, int64_t embed_dim);

  QuerySet init_part_queries(const QuerySet& objects, const std::vector<std::string>& categories,
                             const CategoryTaxonomy& taxonomy, const TextEmbeddingTable& table,
                             int64_t n_repeats);

  torch::Tensor compress(const torch::Tensor& object_row, const torch::Tensor& text_vec);

 private:
  torch::nn::Linear text_proj_{nullptr};  // D_e -> D_q
  torch::nn::Linear compress_{nullptr};   // 2 D_q -> D_q
};
TORCH_MODULE(PartQueryBuilder);

}  // namespace hopseg
