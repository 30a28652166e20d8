#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "hopseg/decoder.hpp"

namespace hopseg {

enum class ParserMode { mllm, qformer, no_hierarchy };

ParserMode parser_mode_from_string(const std::string& s);
std::string to_string(ParserMode mode);

struct ParserConfig {
  int64_t hidden_dim = 96;
  int64_t layers = 2;
  int64_t heads = 4;
  ParserMode mode = ParserMode::mllm;
  int64_t query_dim = 64;       // D_q of the injected queries
  int64_t image_feat_dim = 32;  // channel width of the injected image tokens
  int64_t vocab_size = 128;
  int64_t max_positions = 512;
  int64_t learned_slots = 4;    // N for the no_hierarchy ablation
};

// The verbatim structured prompt template (also stored as a repo asset and
// snapshot-tested). `{objects}` marks where the per-object blocks go.
const std::string& prompt_template();

// Reserved token ids of the toy vocabulary.
inline constexpr int64_t kTokImgOpen = 0;
inline constexpr int64_t kTokImgClose = 1;
inline constexpr int64_t kTokObjPartOpen = 2;
inline constexpr int64_t kTokObjPartClose = 3;
inline constexpr int64_t kTokSeparator = 4;
inline constexpr int64_t kFirstWordToken = 8;

// Deterministic toy tokenizer: reserved delimiters plus hashed word ids.
std::vector<int64_t> tokenize_text(const std::string& text, int64_t vocab_size);

struct TokenSlot {
  enum class Kind { text, image, object_query, part_query };
  Kind kind = Kind::text;
  int64_t token_id = -1;  // for text tokens
  int64_t ref = -1;       // image/object/part row index
};

struct PromptLayout {
  std::vector<TokenSlot> tokens;
  std::vector<int64_t> position_ids;      // sibling part queries share one id
  std::vector<int64_t> query_positions;   // part row -> token position
  std::vector<int64_t> object_positions;  // object row -> token position
  std::pair<int64_t, int64_t> image_span{-1, -1};  // [first, last] image token positions

  torch::Tensor image_tokens;    // (n_img, image_feat_dim)
  torch::Tensor object_queries;  // (n_obj, D_q)
  torch::Tensor part_queries;    // (n_part, D_q)
  std::vector<PartProvenance> part_provenance;
};

// Expands the template: preamble text, image span, then per-object blocks
// [object query, its part queries in taxonomy order]. Throws
// std::invalid_argument when the object list is empty.
PromptLayout build_prompt(const torch::Tensor& image_tokens, const QuerySet& object_queries,
                          const QuerySet& grouped_part_queries, int64_t vocab_size = 128);

class ParserEncoderLayerImpl : public torch::nn::Module {
 public:
  ParserEncoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim);
  torch::Tensor forward(const torch::Tensor& x);  // (seq, dim)

 private:
  torch::nn::MultiheadAttention self_attn_{nullptr};
  torch::nn::Linear ffn1_{nullptr}, ffn2_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(ParserEncoderLayer);

// Feed-forward MLLM stand-in: one bidirectional pass over the prompt; refined
// part queries are read from the last hidden states at the injected slots.
// Sibling part queries inside an object block are canonically ordered before
// the forward pass (and un-permuted after), which makes within-object
// permutation equivariance exact down to the bit level.
class PromptParserImpl : public torch::nn::Module {
 public:
  explicit PromptParserImpl(ParserConfig config = {});

  QuerySet parse(const PromptLayout& layout);

  const ParserConfig& config() const { return config_; }

 private:
  ParserConfig config_;
  torch::nn::Embedding token_embedding_{nullptr}, position_embedding_{nullptr};
  torch::nn::Linear image_proj_{nullptr}, query_proj_{nullptr}, out_proj_{nullptr};
  std::vector<ParserEncoderLayer> layers_;
};
TORCH_MODULE(PromptParser);

// Ablation: cross-attention blocks with part queries attending to object
// queries; no image tokens, no text prompt.
class QFormerParserImpl : public torch::nn::Module {
 public:
  explicit QFormerParserImpl(ParserConfig config = {});

  QuerySet parse(const QuerySet& object_queries, const QuerySet& part_queries);

 private:
  ParserConfig config_;
  torch::nn::Linear in_proj_{nullptr}, kv_proj_{nullptr}, out_proj_{nullptr};
  std::vector<torch::nn::MultiheadAttention> cross_attn_;
  std::vector<torch::nn::Linear> ffn1_, ffn2_;
  std::vector<torch::nn::LayerNorm> norm1_, norm2_;
};
TORCH_MODULE(QFormerParser);

// Ablation: N learnable slot vectors concatenated to each object query,
// bypassing taxonomy retrieval entirely. Provenance carries (object index,
// slot index).
class NoHierarchyInitImpl : public torch::nn::Module {
 public:
  NoHierarchyInitImpl(int64_t query_dim, int64_t n_slots);

  QuerySet init(const QuerySet& object_queries);
  int64_t slots() const { return slot_vectors_.size(0); }

 private:
  torch::Tensor slot_vectors_;       // (N, D_q), learned
  torch::nn::Linear compress_{nullptr};  // 2 D_q -> D_q
};
TORCH_MODULE(NoHierarchyInit);

}  // namespace hopseg
