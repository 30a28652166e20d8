#include "hopseg/parser.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hopseg {

ParserMode parser_mode_from_string(const std::string& s) {
  if (s == "mllm") return ParserMode::mllm;
  if (s == "qformer") return ParserMode::qformer;
  if (s == "no_hierarchy") return ParserMode::no_hierarchy;
  throw ValidationError("unknown parser mode: '" + s + "'");
}

std::string to_string(ParserMode mode) {
  switch (mode) {
    case ParserMode::mllm: return "mllm";
    case ParserMode::qformer: return "qformer";
    case ParserMode::no_hierarchy: return "no_hierarchy";
  }
  return "?";
}

const std::string& prompt_template() {
  static const std::string kTemplate =
      "Please do object-part parsing on the image <img><img_tokens></img>.\n"
      "\n"
      "For each object, you will be given a list of object-part queries:\n"
      "<obj_part>part_query1, part_query 2, ..., part_query n</obj_part>,\n"
      "please implement object-part parsing by refine the queries so that it can be used\n"
      "for later part category and mask prediction.\n"
      "\n"
      "These are all the candidate object-part queries:\n"
      "{objects}\n";
  return kTemplate;
}

std::vector<int64_t> tokenize_text(const std::string& text, int64_t vocab_size) {
  std::vector<int64_t> ids;
  const int64_t word_space = vocab_size - kFirstWordToken;
  size_t i = 0;
  std::string word;
  auto flush_word = [&]() {
    if (!word.empty()) {
      ids.push_back(kFirstWordToken + static_cast<int64_t>(fnv1a(word) % static_cast<uint64_t>(word_space)));
      word.clear();
    }
  };
  auto try_delim = [&](const std::string& delim, int64_t id) {
    if (text.compare(i, delim.size(), delim) == 0) {
      flush_word();
      ids.push_back(id);
      i += delim.size();
      return true;
    }
    return false;
  };
  while (i < text.size()) {
    if (try_delim("<img>", kTokImgOpen) || try_delim("</img>", kTokImgClose) ||
        try_delim("<obj_part>", kTokObjPartOpen) || try_delim("</obj_part>", kTokObjPartClose))
      continue;
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c)))
      flush_word();
    else
      word.push_back(c);
    ++i;
  }
  flush_word();
  return ids;
}

PromptLayout build_prompt(const torch::Tensor& image_tokens, const QuerySet& object_queries,
                          const QuerySet& grouped_part_queries, int64_t vocab_size) {
  const int64_t n_obj = object_queries.size();
  if (n_obj == 0) throw std::invalid_argument("build_prompt: nothing to parse (empty object list)");
  const int64_t n_part = grouped_part_queries.size();

  // per-object row groups, validated against the object order
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(n_obj));
  int64_t last_object = -1;
  for (int64_t r = 0; r < n_part; ++r) {
    const auto& prov = grouped_part_queries.provenance[static_cast<size_t>(r)];
    if (prov.object_index < 0 || prov.object_index >= n_obj)
      throw std::invalid_argument("part query provenance references an unknown object");
    if (prov.object_index < last_object)
      throw std::invalid_argument("part queries must be grouped by object, in object order");
    last_object = prov.object_index;
    groups[static_cast<size_t>(prov.object_index)].push_back(r);
  }

  PromptLayout layout;
  layout.image_tokens = image_tokens;
  layout.object_queries = object_queries.embeddings;
  layout.part_queries = grouped_part_queries.embeddings;
  layout.part_provenance = grouped_part_queries.provenance;
  layout.query_positions.assign(static_cast<size_t>(n_part), -1);
  layout.object_positions.assign(static_cast<size_t>(n_obj), -1);

  int64_t pos = 0;
  auto push_text = [&](const std::string& text) {
    for (int64_t id : tokenize_text(text, vocab_size)) {
      layout.tokens.push_back({TokenSlot::Kind::text, id, -1});
      layout.position_ids.push_back(pos++);
    }
  };

  const std::string& tmpl = prompt_template();
  const std::string img_marker = "<img_tokens>";
  const std::string obj_marker = "{objects}";
  const size_t img_at = tmpl.find(img_marker);
  const size_t obj_at = tmpl.find(obj_marker);

  push_text(tmpl.substr(0, img_at));  // ends with the <img> delimiter token
  layout.image_span.first = pos;
  for (int64_t i = 0; i < image_tokens.size(0); ++i) {
    layout.tokens.push_back({TokenSlot::Kind::image, -1, i});
    layout.position_ids.push_back(pos++);
  }
  layout.image_span.second = pos - 1;
  push_text(tmpl.substr(img_at + img_marker.size(), obj_at - img_at - img_marker.size()));

  for (int64_t o = 0; o < n_obj; ++o) {
    push_text("object " + std::to_string(o + 1));
    layout.object_positions[static_cast<size_t>(o)] = pos;
    layout.tokens.push_back({TokenSlot::Kind::object_query, -1, o});
    layout.position_ids.push_back(pos++);
    push_text("with parts <obj_part>");
    const int64_t shared_slot_pos = pos++;  // one position id shared by all siblings
    for (int64_t r : groups[static_cast<size_t>(o)]) {
      layout.query_positions[static_cast<size_t>(r)] = static_cast<int64_t>(layout.tokens.size());
      layout.tokens.push_back({TokenSlot::Kind::part_query, -1, r});
      layout.position_ids.push_back(shared_slot_pos);
    }
    push_text("</obj_part> ;");
  }
  push_text(tmpl.substr(obj_at + obj_marker.size()));
  return layout;
}

// ---- ParserEncoderLayer ----

ParserEncoderLayerImpl::ParserEncoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim) {
  self_attn_ = register_module("self_attn",
      torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(dim, heads)));
  ffn1_ = register_module("ffn1", torch::nn::Linear(dim, ffn_dim));
  ffn2_ = register_module("ffn2", torch::nn::Linear(ffn_dim, dim));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor ParserEncoderLayerImpl::forward(const torch::Tensor& x) {
  auto seq = x.unsqueeze(1);
  auto [attn, w] = self_attn_->forward(seq, seq, seq);
  seq = norm1_->forward(seq + attn);
  auto ffn = ffn2_->forward(torch::relu(ffn1_->forward(seq)));
  seq = norm2_->forward(seq + ffn);
  return seq.squeeze(1);
}

// ---- PromptParser ----

PromptParserImpl::PromptParserImpl(ParserConfig config) : config_(config) {
  TORCH_CHECK(config_.hidden_dim % config_.heads == 0, "hidden_dim must be divisible by heads");
  token_embedding_ = register_module("token_embedding",
                                     torch::nn::Embedding(config_.vocab_size, config_.hidden_dim));
  position_embedding_ = register_module("position_embedding",
                                        torch::nn::Embedding(config_.max_positions, config_.hidden_dim));
  image_proj_ = register_module("image_proj", torch::nn::Linear(config_.image_feat_dim, config_.hidden_dim));
  query_proj_ = register_module("query_proj", torch::nn::Linear(config_.query_dim, config_.hidden_dim));
  out_proj_ = register_module("out_proj", torch::nn::Linear(config_.hidden_dim, config_.query_dim));
  for (int64_t i = 0; i < config_.layers; ++i) {
    layers_.push_back(ParserEncoderLayer(config_.hidden_dim, config_.heads, config_.hidden_dim * 2));
    register_module("layer" + std::to_string(i), layers_.back());
  }
}

namespace {

// Stable lexicographic order over raw row values; used to canonicalize sibling
// part-query order so equivariance holds bitwise.
std::vector<int64_t> canonical_row_order(const torch::Tensor& rows, const std::vector<int64_t>& indices) {
  std::vector<std::vector<double>> values;
  values.reserve(indices.size());
  for (int64_t r : indices) {
    auto row = rows[r].detach().to(torch::kFloat64).contiguous();
    const double* p = row.data_ptr<double>();
    values.emplace_back(p, p + row.numel());
  }
  std::vector<size_t> order(indices.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::lexicographical_compare(values[a].begin(), values[a].end(), values[b].begin(),
                                        values[b].end());
  });
  std::vector<int64_t> sorted;
  sorted.reserve(indices.size());
  for (size_t k : order) sorted.push_back(indices[k]);
  return sorted;
}

}  // namespace

QuerySet PromptParserImpl::parse(const PromptLayout& layout) {
  if (layout.image_tokens.defined() && layout.image_tokens.size(0) > 0 &&
      layout.image_tokens.size(1) != config_.image_feat_dim)
    throw std::invalid_argument("parse: image token width does not match parser config");
  if (layout.object_queries.size(1) != config_.query_dim ||
      (layout.part_queries.size(0) > 0 && layout.part_queries.size(1) != config_.query_dim))
    throw std::invalid_argument("parse: query width does not match parser config");
  const int64_t seq_len = static_cast<int64_t>(layout.tokens.size());
  TORCH_CHECK(seq_len > 0, "empty prompt layout");
  for (int64_t p : layout.position_ids)
    if (p >= config_.max_positions) throw std::invalid_argument("prompt exceeds parser max positions");

  // canonicalize sibling order per object block
  std::vector<std::vector<int64_t>> blocks;
  std::vector<size_t> block_of_token(layout.tokens.size(), SIZE_MAX);
  {
    std::map<int64_t, std::vector<int64_t>> by_object;
    for (size_t t = 0; t < layout.tokens.size(); ++t)
      if (layout.tokens[t].kind == TokenSlot::Kind::part_query)
        by_object[layout.part_provenance[static_cast<size_t>(layout.tokens[t].ref)].object_index]
            .push_back(layout.tokens[t].ref);
    for (auto& [obj, refs] : by_object) blocks.push_back(canonical_row_order(layout.part_queries, refs));
  }
  // re-map part slots to the canonical row order, block by block
  std::vector<int64_t> slot_row(layout.tokens.size(), -1);
  {
    size_t block_idx = 0, within = 0;
    int64_t current_object = -1;
    for (size_t t = 0; t < layout.tokens.size(); ++t) {
      if (layout.tokens[t].kind != TokenSlot::Kind::part_query) continue;
      const int64_t obj =
          layout.part_provenance[static_cast<size_t>(layout.tokens[t].ref)].object_index;
      if (obj != current_object) {
        current_object = obj;
        within = 0;
        block_idx = 0;
        while (blocks[block_idx].empty() ||
               layout.part_provenance[static_cast<size_t>(blocks[block_idx][0])].object_index != obj)
          ++block_idx;
      }
      slot_row[t] = blocks[block_idx][within++];
    }
  }

  auto dtype = layout.object_queries.scalar_type();
  std::vector<torch::Tensor> embedded;
  embedded.reserve(layout.tokens.size());
  for (size_t t = 0; t < layout.tokens.size(); ++t) {
    const auto& slot = layout.tokens[t];
    switch (slot.kind) {
      case TokenSlot::Kind::text:
        embedded.push_back(token_embedding_->forward(torch::tensor({slot.token_id})).squeeze(0).to(dtype));
        break;
      case TokenSlot::Kind::image:
        embedded.push_back(image_proj_->forward(layout.image_tokens[slot.ref].to(dtype)));
        break;
      case TokenSlot::Kind::object_query:
        embedded.push_back(query_proj_->forward(layout.object_queries[slot.ref]));
        break;
      case TokenSlot::Kind::part_query:
        embedded.push_back(query_proj_->forward(layout.part_queries[slot_row[t]]));
        break;
    }
  }
  auto x = torch::stack(embedded, 0);
  auto pos = position_embedding_->forward(torch::tensor(layout.position_ids, torch::kLong)).to(dtype);
  x = x + pos;
  for (auto& layer : layers_) x = layer->forward(x);

  const int64_t n_part = layout.part_queries.size(0);
  QuerySet refined;
  refined.level = QueryLevel::part;
  refined.provenance = layout.part_provenance;
  if (n_part == 0) {
    refined.embeddings = torch::empty({0, config_.query_dim},
                                      torch::TensorOptions().dtype(dtype));
    return refined;
  }
  std::vector<torch::Tensor> rows(static_cast<size_t>(n_part));
  for (size_t t = 0; t < layout.tokens.size(); ++t)
    if (layout.tokens[t].kind == TokenSlot::Kind::part_query)
      rows[static_cast<size_t>(slot_row[t])] = out_proj_->forward(x[static_cast<int64_t>(t)]);
  refined.embeddings = torch::stack(rows, 0);
  return refined;
}

// ---- QFormerParser ----

QFormerParserImpl::QFormerParserImpl(ParserConfig config) : config_(config) {
  in_proj_ = register_module("in_proj", torch::nn::Linear(config_.query_dim, config_.hidden_dim));
  kv_proj_ = register_module("kv_proj", torch::nn::Linear(config_.query_dim, config_.hidden_dim));
  out_proj_ = register_module("out_proj", torch::nn::Linear(config_.hidden_dim, config_.query_dim));
  for (int64_t i = 0; i < config_.layers; ++i) {
    cross_attn_.push_back(register_module("cross_attn" + std::to_string(i),
        torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(config_.hidden_dim, config_.heads))));
    ffn1_.push_back(register_module("ffn1_" + std::to_string(i),
                                    torch::nn::Linear(config_.hidden_dim, config_.hidden_dim * 2)));
    ffn2_.push_back(register_module("ffn2_" + std::to_string(i),
                                    torch::nn::Linear(config_.hidden_dim * 2, config_.hidden_dim)));
    norm1_.push_back(register_module("norm1_" + std::to_string(i),
        torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.hidden_dim}))));
    norm2_.push_back(register_module("norm2_" + std::to_string(i),
        torch::nn::LayerNorm(torch::nn::LayerNormOptions({config_.hidden_dim}))));
  }
}

QuerySet QFormerParserImpl::parse(const QuerySet& object_queries, const QuerySet& part_queries) {
  QuerySet refined;
  refined.level = QueryLevel::part;
  refined.provenance = part_queries.provenance;
  if (part_queries.size() == 0) {
    refined.embeddings = part_queries.embeddings;
    return refined;
  }
  auto q = in_proj_->forward(part_queries.embeddings).unsqueeze(1);
  auto kv = kv_proj_->forward(object_queries.embeddings).unsqueeze(1);
  for (size_t i = 0; i < cross_attn_.size(); ++i) {
    auto [attn, w] = cross_attn_[i]->forward(q, kv, kv);
    q = norm1_[i]->forward(q + attn);
    auto ffn = ffn2_[i]->forward(torch::relu(ffn1_[i]->forward(q)));
    q = norm2_[i]->forward(q + ffn);
  }
  refined.embeddings = out_proj_->forward(q.squeeze(1));
  return refined;
}

// ---- NoHierarchyInit ----

NoHierarchyInitImpl::NoHierarchyInitImpl(int64_t query_dim, int64_t n_slots) {
  slot_vectors_ = register_parameter("slot_vectors", torch::randn({n_slots, query_dim}) * 0.02);
  compress_ = register_module("compress", torch::nn::Linear(2 * query_dim, query_dim));
}

QuerySet NoHierarchyInitImpl::init(const QuerySet& object_queries) {
  const int64_t n_obj = object_queries.size();
  const int64_t n_slots = slot_vectors_.size(0);
  std::vector<torch::Tensor> rows;
  std::vector<PartProvenance> provenance;
  for (int64_t o = 0; o < n_obj; ++o) {
    for (int64_t j = 0; j < n_slots; ++j) {
      auto cat = torch::cat({object_queries.embeddings[o],
                             slot_vectors_[j].to(object_queries.embeddings.scalar_type())}, 0);
      rows.push_back(compress_->forward(cat));
      provenance.push_back({o, "slot_" + std::to_string(j), j});
    }
  }
  QuerySet out;
  out.level = QueryLevel::part;
  out.provenance = std::move(provenance);
  out.embeddings = rows.empty()
      ? torch::empty({0, object_queries.embeddings.size(1)}, object_queries.embeddings.options())
      : torch::stack(rows, 0);
  return out;
}

}  // namespace hopseg
