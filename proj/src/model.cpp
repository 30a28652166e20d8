#include "hopseg/model.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace hopseg {

ordered_json model_config_to_json(const ModelConfig& c) {
  return ordered_json{
      {"backbone", {{"channels", c.backbone.channels}, {"mask_channels", c.backbone.mask_channels}}},
      {"decoder",
       {{"query_dim", c.decoder.query_dim},
        {"embed_dim", c.decoder.embed_dim},
        {"feature_channels", c.decoder.feature_channels},
        {"mask_channels", c.decoder.mask_channels},
        {"heads", c.decoder.heads},
        {"layers", c.decoder.layers},
        {"ffn_dim", c.decoder.ffn_dim},
        {"max_repeats", c.decoder.max_repeats}}},
      {"parser",
       {{"hidden_dim", c.parser.hidden_dim},
        {"layers", c.parser.layers},
        {"heads", c.parser.heads},
        {"mode", to_string(c.parser.mode)},
        {"query_dim", c.parser.query_dim},
        {"image_feat_dim", c.parser.image_feat_dim},
        {"vocab_size", c.parser.vocab_size},
        {"max_positions", c.parser.max_positions},
        {"learned_slots", c.parser.learned_slots}}},
      {"n_object_queries", c.n_object_queries},
      {"n_part_repeats", c.n_part_repeats},
      {"confidence_threshold", c.confidence_threshold},
      {"detach_object_queries", c.detach_object_queries}};
}

ModelConfig model_config_from_json(const ordered_json& doc) {
  ModelConfig c;
  const auto& b = doc.at("backbone");
  c.backbone.channels = b.at("channels").get<int64_t>();
  c.backbone.mask_channels = b.at("mask_channels").get<int64_t>();
  const auto& d = doc.at("decoder");
  c.decoder.query_dim = d.at("query_dim").get<int64_t>();
  c.decoder.embed_dim = d.at("embed_dim").get<int64_t>();
  c.decoder.feature_channels = d.at("feature_channels").get<int64_t>();
  c.decoder.mask_channels = d.at("mask_channels").get<int64_t>();
  c.decoder.heads = d.at("heads").get<int64_t>();
  c.decoder.layers = d.at("layers").get<int64_t>();
  c.decoder.ffn_dim = d.at("ffn_dim").get<int64_t>();
  c.decoder.max_repeats = d.at("max_repeats").get<int64_t>();
  const auto& p = doc.at("parser");
  c.parser.hidden_dim = p.at("hidden_dim").get<int64_t>();
  c.parser.layers = p.at("layers").get<int64_t>();
  c.parser.heads = p.at("heads").get<int64_t>();
  c.parser.mode = parser_mode_from_string(p.at("mode").get<std::string>());
  c.parser.query_dim = p.at("query_dim").get<int64_t>();
  c.parser.image_feat_dim = p.at("image_feat_dim").get<int64_t>();
  c.parser.vocab_size = p.at("vocab_size").get<int64_t>();
  c.parser.max_positions = p.at("max_positions").get<int64_t>();
  c.parser.learned_slots = p.at("learned_slots").get<int64_t>();
  c.n_object_queries = doc.at("n_object_queries").get<int64_t>();
  c.n_part_repeats = doc.at("n_part_repeats").get<int64_t>();
  c.confidence_threshold = doc.at("confidence_threshold").get<double>();
  c.detach_object_queries = doc.at("detach_object_queries").get<bool>();
  return c;
}

HopsegModelImpl::HopsegModelImpl(ModelConfig config) : config_(config) {
  if (config_.n_part_repeats < 1) throw std::invalid_argument("n_part_repeats must be >= 1");
  if (config_.n_part_repeats > config_.decoder.max_repeats)
    throw std::invalid_argument("n_part_repeats exceeds the decoder's repeat embedding capacity");
  config_.decoder.feature_channels = config_.backbone.channels;
  config_.decoder.mask_channels = config_.backbone.mask_channels;
  config_.parser.query_dim = config_.decoder.query_dim;
  config_.parser.image_feat_dim = config_.backbone.channels;

  backbone_ = register_module("backbone", Backbone(config_.backbone));
  object_decoder_ = register_module("object_decoder", QueryDecoder(config_.decoder));
  part_decoder_ = register_module("part_decoder", QueryDecoder(config_.decoder));
  builder_ = register_module("part_query_builder",
                             PartQueryBuilder(config_.decoder.query_dim, config_.decoder.embed_dim));
  switch (config_.parser.mode) {
    case ParserMode::mllm:
      prompt_parser_ = register_module("parser", PromptParser(config_.parser));
      break;
    case ParserMode::qformer:
      qformer_parser_ = register_module("parser", QFormerParser(config_.parser));
      break;
    case ParserMode::no_hierarchy:
      no_hierarchy_ = register_module("parser",
          NoHierarchyInit(config_.decoder.query_dim, config_.parser.learned_slots));
      break;
  }
}

ObjectOutputs HopsegModelImpl::forward_objects(const torch::Tensor& image,
                                               const torch::Tensor& object_class_embeddings) {
  ObjectOutputs out;
  out.features = backbone_->forward(image);
  auto init = object_decoder_->init_object_queries(out.features, config_.n_object_queries);
  out.queries = object_decoder_->decode(init, out.features);
  out.predictions = object_decoder_->predict(out.queries, object_class_embeddings,
                                             out.features.mask_features);
  return out;
}

namespace {

QuerySet select_rows(const QuerySet& queries, const std::vector<int64_t>& rows, bool detach) {
  QuerySet out;
  out.level = queries.level;
  auto idx = torch::tensor(rows, torch::kLong);
  out.embeddings = queries.embeddings.index_select(0, idx);
  if (detach) out.embeddings = out.embeddings.detach();
  return out;
}

// canonical provenance order: (object index, part key, repeat)
void sort_by_provenance(QuerySet& queries) {
  const int64_t n = queries.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto& prov = queries.provenance;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const auto& pa = prov[static_cast<size_t>(a)];
    const auto& pb = prov[static_cast<size_t>(b)];
    return std::tie(pa.object_index, pa.part_key, pa.repeat) <
           std::tie(pb.object_index, pb.part_key, pb.repeat);
  });
  QuerySet sorted;
  sorted.level = queries.level;
  sorted.embeddings = queries.embeddings.index_select(0, torch::tensor(order, torch::kLong));
  sorted.provenance.reserve(prov.size());
  for (int64_t i : order) sorted.provenance.push_back(prov[static_cast<size_t>(i)]);
  queries = std::move(sorted);
}

}  // namespace

PartOutputs HopsegModelImpl::forward_parts(const ObjectOutputs& objects,
                                           const std::vector<int64_t>& rows,
                                           const std::vector<std::string>& categories,
                                           const CategoryTaxonomy& taxonomy,
                                           const TextEmbeddingTable& table,
                                           const torch::Tensor& part_class_embeddings) {
  if (rows.size() != categories.size())
    throw std::invalid_argument("forward_parts: one category per retained row required");
  PartOutputs out;
  QuerySet selected = select_rows(objects.queries, rows, config_.detach_object_queries);

  if (config_.parser.mode == ParserMode::no_hierarchy) {
    out.initial = no_hierarchy_->init(selected);
    sort_by_provenance(out.initial);
    out.refined = out.initial;
  } else {
    out.initial = builder_->init_part_queries(selected, categories, taxonomy, table,
                                              config_.n_part_repeats);
    sort_by_provenance(out.initial);
    if (out.initial.size() == 0) {
      out.refined = out.initial;
    } else if (config_.parser.mode == ParserMode::mllm) {
      const auto& coarsest = objects.features.levels.rbegin()->second;
      auto image_tokens = coarsest.flatten(1).transpose(0, 1);  // (hw, D_s)
      if (config_.detach_object_queries) image_tokens = image_tokens.detach();
      auto layout = build_prompt(image_tokens, selected, out.initial, config_.parser.vocab_size);
      out.refined = prompt_parser_->parse(layout);
    } else {
      out.refined = qformer_parser_->parse(selected, out.initial);
    }
  }

  // anchor each part query at its parent object's predicted box center
  if (out.refined.size() > 0 && objects.predictions.boxes.defined()) {
    auto centers = objects.predictions.boxes.slice(1, 0, 2).detach();
    std::vector<torch::Tensor> refs;
    refs.reserve(out.refined.provenance.size());
    for (const auto& p : out.refined.provenance)
      refs.push_back(centers[rows[static_cast<size_t>(p.object_index)]]);
    out.refined.reference = torch::stack(refs, 0);
  }

  out.decoded = part_decoder_->decode(out.refined, objects.features);
  out.predictions = part_decoder_->predict(out.decoded, part_class_embeddings,
                                           objects.features.mask_features);
  return out;
}

SceneInference HopsegModelImpl::infer(const torch::Tensor& image, const CategoryTaxonomy& taxonomy,
                                      const TextEmbeddingTable& table) {
  torch::NoGradGuard no_grad;
  SceneInference out;
  auto object_embeddings = encode_categories(table, taxonomy.objects);
  out.objects = forward_objects(image, object_embeddings);

  auto logits = out.objects.predictions.class_logits;  // (N, |objects|)
  auto probs = torch::sigmoid(logits);
  auto best = probs.max(1);
  auto score_acc = std::get<0>(best).to(torch::kFloat64).contiguous();
  auto index_acc = std::get<1>(best).contiguous();
  for (int64_t i = 0; i < logits.size(0); ++i) {
    if (score_acc[i].item<double>() <= config_.confidence_threshold) continue;
    out.retained_rows.push_back(i);
    out.retained_categories.push_back(
        taxonomy.objects[static_cast<size_t>(index_acc[i].item<int64_t>())]);
  }

  auto part_keys = taxonomy.all_part_keys();
  auto part_embeddings = part_keys.empty()
      ? torch::empty({0, table.dim()}, torch::kFloat32)
      : encode_categories(table, part_keys);
  out.parts = forward_parts(out.objects, out.retained_rows, out.retained_categories, taxonomy,
                            table, part_embeddings);
  return out;
}

void save_checkpoint(HopsegModel& model, const ordered_json& extra, const std::string& dir) {
  fs::create_directories(dir);
  torch::save(model, (fs::path(dir) / "model.pt").string());
  ordered_json doc;
  doc["format_version"] = 1;
  doc["model"] = model_config_to_json(model->config());
  doc["extra"] = extra;
  std::ofstream out((fs::path(dir) / "config.json").string());
  if (!out) throw ValidationError("cannot write checkpoint config in " + dir);
  out << doc.dump(1) << "\n";
}

std::pair<HopsegModel, ordered_json> load_checkpoint(const std::string& dir) {
  const auto config_path = fs::path(dir) / "config.json";
  std::ifstream in(config_path.string());
  if (!in) throw ValidationError("missing checkpoint config: " + config_path.string());
  ordered_json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint config: ") + e.what());
  }
  if (doc.value("format_version", -1) != 1)
    throw ValidationError("unsupported checkpoint format version");
  HopsegModel model(model_config_from_json(doc.at("model")));
  torch::load(model, (fs::path(dir) / "model.pt").string());
  return {std::move(model), doc.value("extra", ordered_json::object())};
}

}  // namespace hopseg
