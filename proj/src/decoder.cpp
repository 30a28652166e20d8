#include "hopseg/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hopseg {

torch::Tensor sine_position_embedding(int64_t h, int64_t w, int64_t dim) {
  TORCH_CHECK(dim % 4 == 0, "position embedding dim must be divisible by 4");
  const int64_t quarter = dim / 4;
  auto ys = torch::arange(h, torch::kFloat32).unsqueeze(1).expand({h, w}).reshape({-1});
  auto xs = torch::arange(w, torch::kFloat32).unsqueeze(0).expand({h, w}).reshape({-1});
  ys = ys / std::max<int64_t>(h - 1, 1) * 6.283185307179586;
  xs = xs / std::max<int64_t>(w - 1, 1) * 6.283185307179586;
  auto freqs = torch::pow(2.0, torch::arange(quarter, torch::kFloat32));
  auto ang_y = ys.unsqueeze(1) * freqs.unsqueeze(0);  // (hw, quarter)
  auto ang_x = xs.unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({ang_y.sin(), ang_y.cos(), ang_x.sin(), ang_x.cos()}, 1);
}

torch::Tensor level_centers(const MultiScaleFeatures& features) {
  std::vector<torch::Tensor> centers;
  for (const auto& [s, level] : features.levels) {
    const int64_t h = level.size(1);
    const int64_t w = level.size(2);
    auto cy = ((torch::arange(h, torch::kFloat32) + 0.5) / static_cast<double>(h))
                  .unsqueeze(1)
                  .expand({h, w})
                  .reshape({-1});
    auto cx = ((torch::arange(w, torch::kFloat32) + 0.5) / static_cast<double>(w))
                  .unsqueeze(0)
                  .expand({h, w})
                  .reshape({-1});
    centers.push_back(torch::stack({cx, cy}, 1));
  }
  return torch::cat(centers, 0);
}

namespace {

torch::Tensor inverse_sigmoid(const torch::Tensor& x) {
  auto clamped = x.clamp(1e-4, 1.0 - 1e-4);
  return torch::log(clamped / (1.0 - clamped));
}

}  // namespace

// ---- DecoderLayer ----

DecoderLayerImpl::DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim) {
  cross_attn_ = register_module("cross_attn",
      torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(dim, heads)));
  self_attn_ = register_module("self_attn",
      torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(dim, heads)));
  ffn1_ = register_module("ffn1", torch::nn::Linear(dim, ffn_dim));
  ffn2_ = register_module("ffn2", torch::nn::Linear(ffn_dim, dim));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm3_ = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& queries, const torch::Tensor& query_pos,
                                        const torch::Tensor& memory, const torch::Tensor& memory_pos) {
  // seq-first layout with batch 1; positions only enter queries and keys so
  // the content stream keeps per-query identity across layers
  auto q = queries.unsqueeze(1);
  auto qp = query_pos.unsqueeze(1);
  auto k = (memory + memory_pos).unsqueeze(1);
  auto v = memory.unsqueeze(1);
  auto [cross, w1] = cross_attn_->forward(q + qp, k, v);
  q = norm1_->forward(q + cross);
  auto [self, w2] = self_attn_->forward(q + qp, q + qp, q);
  q = norm2_->forward(q + self);
  auto ffn = ffn2_->forward(torch::relu(ffn1_->forward(q)));
  q = norm3_->forward(q + ffn);
  return q.squeeze(1);
}

// ---- QueryDecoder ----

QueryDecoderImpl::QueryDecoderImpl(DecoderConfig config) : config_(config) {
  if (config_.layers < 1) throw std::invalid_argument("decoder needs at least one layer");
  objectness_head_ = register_module("objectness_head", torch::nn::Linear(config_.feature_channels, 1));
  input_proj_ = register_module("input_proj", torch::nn::Linear(config_.feature_channels, config_.query_dim));
  level_embedding_ = register_module("level_embedding", torch::nn::Embedding(4, config_.query_dim));
  repeat_embedding_ = register_module("repeat_embedding",
                                      torch::nn::Embedding(config_.max_repeats, config_.query_dim));
  for (int64_t i = 0; i < config_.layers; ++i) {
    layers_.push_back(DecoderLayer(config_.query_dim, config_.heads, config_.ffn_dim));
    register_module("layer" + std::to_string(i), layers_.back());
  }
  box_head_ = register_module("box_head", torch::nn::Sequential(
      torch::nn::Linear(config_.query_dim, config_.query_dim), torch::nn::ReLU(),
      torch::nn::Linear(config_.query_dim, config_.query_dim), torch::nn::ReLU(),
      torch::nn::Linear(config_.query_dim, 4)));
  class_proj_ = register_module("class_proj", torch::nn::Linear(config_.query_dim, config_.embed_dim));
  mask_head_ = register_module("mask_head", torch::nn::Sequential(
      torch::nn::Linear(config_.query_dim, config_.query_dim), torch::nn::ReLU(),
      torch::nn::Linear(config_.query_dim, config_.query_dim), torch::nn::ReLU(),
      torch::nn::Linear(config_.query_dim, config_.mask_channels)));
}

std::pair<torch::Tensor, torch::Tensor> QueryDecoderImpl::flatten_levels(const MultiScaleFeatures& features) {
  std::vector<torch::Tensor> tokens, positions;
  int64_t level_index = 0;
  auto dtype = features.levels.at(2).dtype();
  for (const auto& [s, level] : features.levels) {
    const int64_t h = level.size(1);
    const int64_t w = level.size(2);
    tokens.push_back(level.flatten(1).transpose(0, 1));  // (hw, D_s)
    auto pos = sine_position_embedding(h, w, config_.query_dim).to(dtype) +
               level_embedding_->forward(torch::tensor({level_index})).to(dtype);
    positions.push_back(pos);
    ++level_index;
  }
  return {torch::cat(tokens, 0), torch::cat(positions, 0)};
}

torch::Tensor QueryDecoderImpl::objectness_scores(const MultiScaleFeatures& features) {
  auto [tokens, positions] = flatten_levels(features);
  return objectness_head_->forward(tokens).squeeze(1);
}

QuerySet QueryDecoderImpl::init_object_queries(const MultiScaleFeatures& features, int64_t n) {
  if (n <= 0) throw std::invalid_argument("number of object queries must be positive");
  auto [tokens, positions] = flatten_levels(features);
  if (n > tokens.size(0)) throw std::invalid_argument("more object queries than feature locations");

  auto scores = objectness_head_->forward(tokens).squeeze(1);
  // stable top-N: score descending, flattened index ascending on ties
  std::vector<int64_t> order(static_cast<size_t>(tokens.size(0)));
  std::iota(order.begin(), order.end(), 0);
  auto score_acc = scores.to(torch::kFloat64).contiguous();
  const double* s = score_acc.data_ptr<double>();
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return s[a] > s[b]; });
  order.resize(static_cast<size_t>(n));

  auto index = torch::tensor(order, torch::kLong);
  auto selected = tokens.index_select(0, index);
  auto pos = positions.index_select(0, index);
  QuerySet queries;
  queries.level = QueryLevel::object;
  queries.embeddings = input_proj_->forward(selected);
  queries.positions = pos;
  queries.reference = level_centers(features).index_select(0, index).detach();
  return queries;
}

QuerySet QueryDecoderImpl::decode(const QuerySet& queries, const MultiScaleFeatures& features,
                                  int64_t layers) {
  if (layers == -1) layers = config_.layers;
  if (layers < 1) throw std::invalid_argument("decode requires at least one layer");
  if (layers > config_.layers) throw std::invalid_argument("decode: more layers requested than configured");
  if (queries.size() == 0) return queries;

  auto [tokens, positions] = flatten_levels(features);
  auto memory = input_proj_->forward(tokens);

  auto q = queries.embeddings;
  torch::Tensor q_pos = queries.positions;
  if (queries.level == QueryLevel::part) {
    std::vector<int64_t> repeats;
    repeats.reserve(queries.provenance.size());
    for (const auto& p : queries.provenance)
      repeats.push_back(std::min(p.repeat, config_.max_repeats - 1));
    auto repeat_pos = repeat_embedding_->forward(torch::tensor(repeats, torch::kLong)).to(q.dtype());
    q_pos = q_pos.defined() ? q_pos + repeat_pos : repeat_pos;
  }
  if (!q_pos.defined()) q_pos = torch::zeros_like(q);
  for (int64_t i = 0; i < layers; ++i)
    q = layers_[static_cast<size_t>(i)]->forward(q, q_pos, memory, positions);

  QuerySet out = queries;
  out.embeddings = q;
  return out;
}

torch::Tensor QueryDecoderImpl::predict_boxes(const QuerySet& queries) {
  auto raw = box_head_->forward(queries.embeddings);
  if (!queries.reference.defined() || raw.size(0) == 0) return torch::sigmoid(raw);
  auto anchor = inverse_sigmoid(queries.reference.to(raw.dtype())).detach();
  auto center = torch::sigmoid(raw.slice(1, 0, 2) + anchor);
  auto extent = torch::sigmoid(raw.slice(1, 2, 4));
  return torch::cat({center, extent}, 1);
}

torch::Tensor QueryDecoderImpl::predict_classes(const QuerySet& queries,
                                                const torch::Tensor& class_embeddings) {
  return class_proj_->forward(queries.embeddings).matmul(class_embeddings.to(queries.embeddings.dtype()).t());
}

torch::Tensor QueryDecoderImpl::mask_embed(const torch::Tensor& queries) {
  return mask_head_->forward(queries);
}

torch::Tensor QueryDecoderImpl::predict_masks(const QuerySet& queries, const torch::Tensor& mask_features) {
  auto embed = mask_embed(queries.embeddings);  // (n, D_m)
  return torch::einsum("nd,dhw->nhw", {embed, mask_features.to(embed.dtype())});
}

PredictionSet QueryDecoderImpl::predict(const QuerySet& queries, const torch::Tensor& class_embeddings,
                                        const torch::Tensor& mask_features) {
  PredictionSet preds;
  preds.level = queries.level;
  preds.provenance = queries.provenance;
  preds.boxes = predict_boxes(queries);
  preds.class_logits = predict_classes(queries, class_embeddings);
  preds.mask_logits = predict_masks(queries, mask_features);
  return preds;
}

// ---- PartQueryBuilder ----

PartQueryBuilderImpl::PartQueryBuilderImpl(int64_t query_dim, int64_t embed_dim) {
  text_proj_ = register_module("text_proj", torch::nn::Linear(embed_dim, query_dim));
  compress_ = register_module("compress", torch::nn::Linear(2 * query_dim, query_dim));
}

torch::Tensor PartQueryBuilderImpl::compress(const torch::Tensor& object_row, const torch::Tensor& text_vec) {
  auto projected = text_proj_->forward(text_vec.to(object_row.dtype()));
  return compress_->forward(torch::cat({object_row, projected}, 0));
}

QuerySet PartQueryBuilderImpl::init_part_queries(const QuerySet& objects,
                                                 const std::vector<std::string>& categories,
                                                 const CategoryTaxonomy& taxonomy,
                                                 const TextEmbeddingTable& table, int64_t n_repeats) {
  if (n_repeats <= 0) throw std::invalid_argument("N_p must be >= 1");
  if (static_cast<int64_t>(categories.size()) != objects.size())
    throw std::invalid_argument("one category per retained object required");

  std::vector<torch::Tensor> rows;
  std::vector<PartProvenance> provenance;
  for (int64_t o = 0; o < objects.size(); ++o) {
    const auto part_keys = parts_of(taxonomy, categories[static_cast<size_t>(o)]);
    for (const auto& key : part_keys) {
      auto base = compress(objects.embeddings[o], table.vector_for(key));
      for (int64_t r = 0; r < n_repeats; ++r) {
        rows.push_back(base);
        provenance.push_back({o, key, r});
      }
    }
  }

  QuerySet parts;
  parts.level = QueryLevel::part;
  parts.provenance = std::move(provenance);
  parts.embeddings = rows.empty()
      ? torch::empty({0, objects.embeddings.size(1)}, objects.embeddings.options())
      : torch::stack(rows, 0);
  return parts;
}

}  // namespace hopseg
