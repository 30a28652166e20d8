#include "hopseg/taxonomy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace hopseg {

namespace {

const std::set<std::string> kReservedKeys = {"objects", "synonyms", "alternative_hierarchy",
                                             "embedding_overrides", "version"};

std::string strip_possessive(const std::string& key, const std::string& object) {
  const std::string prefix = object + "'s ";
  if (key.rfind(prefix, 0) == 0) return key.substr(prefix.size());
  return key;
}

}  // namespace

std::atomic<uint64_t>& CategoryTaxonomy::parts_of_calls() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

std::vector<std::string> CategoryTaxonomy::part_keys_of(const std::string& object) const {
  auto it = hierarchy.find(object);
  if (it == hierarchy.end()) throw LookupError("unknown object category: '" + object + "'");
  std::vector<std::string> keys;
  keys.reserve(it->second.size());
  for (const auto& part : it->second) keys.push_back(part_key(object, part));
  return keys;
}

std::vector<std::string> CategoryTaxonomy::all_part_keys() const {
  std::vector<std::string> keys;
  for (const auto& object : objects)
    for (const auto& part : hierarchy.at(object)) keys.push_back(part_key(object, part));
  return keys;
}

std::vector<std::string> CategoryTaxonomy::all_keys() const {
  std::vector<std::string> keys = objects;
  auto parts = all_part_keys();
  keys.insert(keys.end(), parts.begin(), parts.end());
  return keys;
}

bool CategoryTaxonomy::is_seen(const std::string& key) const {
  auto it = seen_flags.find(key);
  if (it == seen_flags.end()) throw LookupError("category key without seen/unseen flag: '" + key + "'");
  return it->second;
}

std::vector<std::string> parts_of(const CategoryTaxonomy& taxonomy, const std::string& object_category) {
  CategoryTaxonomy::parts_of_calls()++;
  return taxonomy.part_keys_of(object_category);
}

CategoryTaxonomy parse_taxonomy(const ordered_json& document) {
  if (!document.is_object()) throw ValidationError("hierarchy document must be a JSON object");
  ordered_json objects;
  if (document.contains("objects")) {
    objects = document.at("objects");
  } else {
    objects = ordered_json::object();
    for (auto it = document.begin(); it != document.end(); ++it)
      if (!kReservedKeys.count(it.key())) objects[it.key()] = it.value();
  }
  if (!objects.is_object()) throw ValidationError("'objects' must be a map of object -> parts");

  CategoryTaxonomy taxonomy;
  for (auto it = objects.begin(); it != objects.end(); ++it) {
    const std::string object = it.key();
    if (object.empty()) throw ValidationError("empty object name in hierarchy document");
    bool object_unseen = false;
    ordered_json part_list;
    if (it.value().is_array()) {
      part_list = it.value();
    } else if (it.value().is_object()) {
      object_unseen = it.value().value("unseen", false);
      part_list = it.value().value("parts", ordered_json::array());
    } else {
      throw ValidationError("object '" + object + "' must map to a part list or an object block");
    }

    taxonomy.objects.push_back(object);
    taxonomy.seen_flags[object] = !object_unseen;
    std::vector<std::string>& parts = taxonomy.hierarchy[object];
    std::set<std::string> seen_parts;
    for (const auto& entry : part_list) {
      std::string part;
      bool part_unseen = object_unseen;
      if (entry.is_string()) {
        part = entry.get<std::string>();
      } else if (entry.is_object()) {
        part = entry.value("name", "");
        part_unseen = entry.value("unseen", object_unseen);
      }
      if (part.empty()) throw ValidationError("empty part name under object '" + object + "'");
      if (!seen_parts.insert(part).second)
        throw ValidationError("duplicate part '" + part + "' under object '" + object + "'");
      parts.push_back(part);
      taxonomy.parts.emplace_back(object, part);
      taxonomy.seen_flags[CategoryTaxonomy::part_key(object, part)] = !part_unseen;
    }
  }
  return taxonomy;
}

EmbeddingSpec parse_embedding_spec(const ordered_json& document) {
  EmbeddingSpec spec;
  if (document.contains("synonyms")) {
    for (auto it = document.at("synonyms").begin(); it != document.at("synonyms").end(); ++it) {
      std::vector<SynonymSpec> list;
      for (const auto& entry : it.value()) {
        SynonymSpec s;
        if (entry.is_string()) {
          s.name = entry.get<std::string>();
          s.target_cos = 0.9;
        } else {
          s.name = entry.at("name").get<std::string>();
          s.target_cos = entry.value("target_cos", 0.9);
        }
        list.push_back(std::move(s));
      }
      spec.synonyms[it.key()] = std::move(list);
    }
  }
  if (document.contains("alternative_hierarchy")) {
    for (auto it = document.at("alternative_hierarchy").begin();
         it != document.at("alternative_hierarchy").end(); ++it)
      spec.alternative_hierarchy[it.key()] = it.value().get<std::vector<std::string>>();
  }
  if (document.contains("embedding_overrides")) {
    for (auto it = document.at("embedding_overrides").begin();
         it != document.at("embedding_overrides").end(); ++it) {
      EmbeddingOverride o;
      o.like = it.value().at("like").get<std::string>();
      o.target_cos = it.value().value("target_cos", 0.9);
      spec.overrides[it.key()] = o;
    }
  }
  return spec;
}

ordered_json taxonomy_to_json(const CategoryTaxonomy& taxonomy) {
  ordered_json objects = ordered_json::object();
  for (const auto& object : taxonomy.objects) {
    ordered_json block;
    block["parts"] = ordered_json::array();
    for (const auto& part : taxonomy.hierarchy.at(object)) {
      const std::string key = CategoryTaxonomy::part_key(object, part);
      if (taxonomy.seen_flags.at(key))
        block["parts"].push_back(part);
      else
        block["parts"].push_back({{"name", part}, {"unseen", true}});
    }
    if (!taxonomy.seen_flags.at(object)) block["unseen"] = true;
    objects[object] = block;
  }
  return ordered_json{{"objects", objects}};
}

ordered_json load_hierarchy_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open hierarchy document: " + path);
  ordered_json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed hierarchy document " + path + ": " + e.what());
  }
  return doc;
}

CategoryTaxonomy load_taxonomy(const std::string& path) {
  return parse_taxonomy(load_hierarchy_document(path));
}

// ---- TextEmbeddingTable ----

namespace {

torch::Tensor trigram_embedding(const std::string& text, int64_t dim, uint64_t seed) {
  std::string padded = "^" + text + "$";
  std::vector<double> acc(static_cast<size_t>(dim), 0.0);
  auto add_token = [&](const std::string& token) {
    std::mt19937_64 rng(mix_seeds(fnv1a(token), seed));
    for (auto& v : acc) {
      // uniform in (-1, 1); distribution shape is irrelevant, determinism is not
      v += (static_cast<double>(rng() >> 11) * 0x1.0p-53) * 2.0 - 1.0;
    }
  };
  if (padded.size() < 3) {
    add_token(padded);
  } else {
    for (size_t i = 0; i + 3 <= padded.size(); ++i) add_token(padded.substr(i, 3));
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    acc[0] = 1.0;
    norm = 1.0;
  }
  auto out = torch::empty({dim}, torch::kFloat32);
  auto a = out.accessor<float, 1>();
  for (int64_t i = 0; i < dim; ++i) a[i] = static_cast<float>(acc[static_cast<size_t>(i)] / norm);
  return out;
}

// Gram-Schmidt mix: unit vector at the requested cosine to `anchor`.
torch::Tensor anchored_vector(const torch::Tensor& anchor, const std::string& name, double target_cos,
                              int64_t dim, uint64_t seed) {
  auto w = trigram_embedding(name, dim, mix_seeds(seed, 0x5e1ec7edULL)).to(torch::kFloat64);
  auto v = anchor.to(torch::kFloat64);
  auto u = w - (w.dot(v)) * v;
  double un = u.norm().item<double>();
  if (un < 1e-9) {
    // pathological collinearity: fall back to a rotated basis vector
    u = torch::zeros({dim}, torch::kFloat64);
    u[fnv1a(name) % static_cast<uint64_t>(dim)] = 1.0;
    u = u - (u.dot(v)) * v;
    un = u.norm().item<double>();
  }
  u = u / un;
  double c = std::clamp(target_cos, -1.0, 1.0);
  auto mixed = c * v + std::sqrt(1.0 - c * c) * u;
  return (mixed / mixed.norm()).to(torch::kFloat32);
}

}  // namespace

TextEmbeddingTable TextEmbeddingTable::build(const CategoryTaxonomy& taxonomy, const EmbeddingSpec& spec,
                                             int64_t dim, uint64_t seed) {
  if (dim <= 0) throw std::invalid_argument("embedding dim must be positive");
  TextEmbeddingTable table;
  table.dim_ = dim;
  table.seed_ = seed;
  table.spec_ = spec;

  std::vector<std::string> keys = taxonomy.all_keys();
  for (const auto& [object, alt_parts] : spec.alternative_hierarchy)
    for (const auto& part : alt_parts) keys.push_back(CategoryTaxonomy::part_key(object, part));
  for (const auto& key : keys)
    if (!table.entries_.count(key)) table.entries_[key] = trigram_embedding(key, dim, seed);

  for (const auto& [key, o] : spec.overrides) {
    auto it = table.entries_.find(o.like);
    if (it == table.entries_.end())
      throw LookupError("embedding override for '" + key + "' anchored to unknown key '" + o.like + "'");
    table.entries_[key] = anchored_vector(it->second, key, o.target_cos, dim, seed);
  }

  for (const auto& [key, list] : spec.synonyms) {
    auto it = table.entries_.find(key);
    if (it == table.entries_.end())
      throw LookupError("synonyms configured for unknown category key '" + key + "'");
    for (const auto& s : list) {
      SynonymEntry entry;
      entry.name = s.name;
      entry.target_cos = s.target_cos;
      entry.vec = anchored_vector(it->second, s.name, s.target_cos, dim, seed);
      table.synonyms_[key].push_back(std::move(entry));
    }
  }
  return table;
}

bool TextEmbeddingTable::contains(const std::string& key) const {
  if (entries_.count(key)) return true;
  for (const auto& [canonical, list] : synonyms_)
    for (const auto& s : list)
      if (s.name == key) return true;
  return false;
}

torch::Tensor TextEmbeddingTable::vector_for(const std::string& key) const {
  auto it = entries_.find(key);
  if (it != entries_.end()) return it->second;
  for (const auto& [canonical, list] : synonyms_)
    for (const auto& s : list)
      if (s.name == key) return s.vec;
  throw LookupError("unresolvable category key: '" + key + "'");
}

void TextEmbeddingTable::insert(const std::string& key, torch::Tensor vec) {
  entries_[key] = std::move(vec);
}

torch::Tensor TextEmbeddingTable::raw_embedding(const std::string& text) const {
  return trigram_embedding(text, dim_, seed_);
}

torch::Tensor encode_categories(const TextEmbeddingTable& table, const std::vector<std::string>& keys) {
  auto out = torch::empty({static_cast<int64_t>(keys.size()), table.dim()}, torch::kFloat32);
  for (size_t i = 0; i < keys.size(); ++i) out[static_cast<int64_t>(i)] = table.vector_for(keys[i]);
  return out;
}

// ---- perturbation protocols ----

PerturbKind perturb_kind_from_string(const std::string& s) {
  if (s == "shuffle_objects") return PerturbKind::shuffle_objects;
  if (s == "shuffle_parts") return PerturbKind::shuffle_parts;
  if (s == "synonym_replace") return PerturbKind::synonym_replace;
  if (s == "hierarchy_replace") return PerturbKind::hierarchy_replace;
  throw ValidationError("unknown perturbation kind: '" + s + "'");
}

std::string to_string(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::shuffle_objects: return "shuffle_objects";
    case PerturbKind::shuffle_parts: return "shuffle_parts";
    case PerturbKind::synonym_replace: return "synonym_replace";
    case PerturbKind::hierarchy_replace: return "hierarchy_replace";
  }
  return "?";
}

namespace {

// Deterministic choice of `count` indices out of n.
std::vector<size_t> pick_indices(size_t n, size_t count, uint64_t seed) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::pair<CategoryTaxonomy, TextEmbeddingTable> perturb(const CategoryTaxonomy& taxonomy,
                                                        const TextEmbeddingTable& table,
                                                        const HierarchyPerturbation& p) {
  if (p.fraction < 0.0 || p.fraction > 1.0)
    throw std::invalid_argument("perturbation fraction must be in [0, 1]");
  CategoryTaxonomy out = taxonomy;
  TextEmbeddingTable out_table = table;
  if (p.fraction == 0.0 && (p.kind == PerturbKind::synonym_replace || p.kind == PerturbKind::hierarchy_replace))
    return {out, out_table};

  switch (p.kind) {
    case PerturbKind::shuffle_objects: {
      std::mt19937_64 rng(p.seed);
      std::shuffle(out.objects.begin(), out.objects.end(), rng);
      out.parts.clear();
      for (const auto& object : out.objects)
        for (const auto& part : out.hierarchy.at(object)) out.parts.emplace_back(object, part);
      break;
    }
    case PerturbKind::shuffle_parts: {
      for (const auto& object : out.objects) {
        auto& parts = out.hierarchy.at(object);
        std::mt19937_64 rng(mix_seeds(p.seed, fnv1a(object)));
        std::shuffle(parts.begin(), parts.end(), rng);
      }
      out.parts.clear();
      for (const auto& object : out.objects)
        for (const auto& part : out.hierarchy.at(object)) out.parts.emplace_back(object, part);
      break;
    }
    case PerturbKind::synonym_replace: {
      const size_t n = taxonomy.parts.size();
      const size_t count = static_cast<size_t>(std::llround(p.fraction * static_cast<double>(n)));
      auto chosen = pick_indices(n, count, p.seed);
      std::vector<std::string> missing;
      for (size_t i : chosen) {
        const auto& [object, part] = taxonomy.parts[i];
        const std::string key = CategoryTaxonomy::part_key(object, part);
        auto it = table.synonym_map().find(key);
        if (it == table.synonym_map().end() || it->second.empty()) missing.push_back(key);
      }
      if (!missing.empty()) {
        std::ostringstream oss;
        oss << "synonym_replace: no synonym configured for:";
        for (const auto& k : missing) oss << " '" << k << "'";
        throw ValidationError(oss.str());
      }
      for (size_t i : chosen) {
        const auto& [object, part] = taxonomy.parts[i];
        const std::string key = CategoryTaxonomy::part_key(object, part);
        const auto& candidates = table.synonym_map().at(key);
        std::mt19937_64 rng(mix_seeds(p.seed, fnv1a(key)));
        const SynonymEntry& syn = candidates[rng() % candidates.size()];
        const std::string new_part = strip_possessive(syn.name, object);
        auto& parts = out.hierarchy.at(object);
        std::replace(parts.begin(), parts.end(), part, new_part);
        const std::string new_key = CategoryTaxonomy::part_key(object, new_part);
        out.seen_flags[new_key] = taxonomy.seen_flags.at(key);
        out_table.insert(new_key, syn.vec);
      }
      out.parts.clear();
      for (const auto& object : out.objects)
        for (const auto& part : out.hierarchy.at(object)) out.parts.emplace_back(object, part);
      break;
    }
    case PerturbKind::hierarchy_replace: {
      const size_t n = taxonomy.objects.size();
      const size_t count = static_cast<size_t>(std::llround(p.fraction * static_cast<double>(n)));
      auto chosen = pick_indices(n, count, p.seed);
      const auto& alternatives = table.spec().alternative_hierarchy;
      std::vector<std::string> missing;
      for (size_t i : chosen)
        if (!alternatives.count(taxonomy.objects[i])) missing.push_back(taxonomy.objects[i]);
      if (!missing.empty()) {
        std::ostringstream oss;
        oss << "hierarchy_replace: no alternative part list configured for:";
        for (const auto& k : missing) oss << " '" << k << "'";
        throw ValidationError(oss.str());
      }
      for (size_t i : chosen) {
        const std::string& object = taxonomy.objects[i];
        out.hierarchy.at(object) = alternatives.at(object);
        for (const auto& part : out.hierarchy.at(object))
          out.seen_flags[CategoryTaxonomy::part_key(object, part)] = true;
      }
      out.parts.clear();
      for (const auto& object : out.objects)
        for (const auto& part : out.hierarchy.at(object)) out.parts.emplace_back(object, part);
      break;
    }
  }
  return {out, out_table};
}

}  // namespace hopseg
