#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "hopseg/common.hpp"

namespace hopseg {

using ordered_json = nlohmann::ordered_json;

// Open-vocabulary category space: object categories, per-object part lists and
// the seen/unseen partition used by both training filters and evaluation splits.
struct CategoryTaxonomy {
  std::vector<std::string> objects;                            // ordered object categories
  std::vector<std::pair<std::string, std::string>> parts;     // (object, part short name)
  std::map<std::string, std::vector<std::string>> hierarchy;  // object -> ordered part short names
  std::map<std::string, bool> seen_flags;                     // category key -> seen in training

  // Part category keys are rendered as "<object>'s <part>" so they are globally unique.
  static std::string part_key(const std::string& object, const std::string& part) {
    return object + "'s " + part;
  }

  bool has_object(const std::string& name) const { return hierarchy.count(name) > 0; }
  std::vector<std::string> part_keys_of(const std::string& object) const;
  std::vector<std::string> all_part_keys() const;  // taxonomy order: per object, per part
  std::vector<std::string> all_keys() const;       // objects first, then part keys

  // Single source of truth for the seen/unseen partition.
  bool is_seen(const std::string& key) const;

  // Diagnostic probe: number of parts_of() calls since process start.
  static std::atomic<uint64_t>& parts_of_calls();
};

// parts_of: ordered part category keys of one object. Throws LookupError for
// unknown objects.
std::vector<std::string> parts_of(const CategoryTaxonomy& taxonomy, const std::string& object_category);

struct SynonymSpec {
  std::string name;       // full category key of the synonym, e.g. "bus's tyre"
  double target_cos = 1.0;
};

struct EmbeddingOverride {
  std::string like;       // existing key whose embedding this one is anchored to
  double target_cos = 1.0;
};

// Extra blocks of the hierarchy document that configure the embedding stub and
// the perturbation protocols.
struct EmbeddingSpec {
  std::map<std::string, std::vector<SynonymSpec>> synonyms;            // canonical key -> synonyms
  std::map<std::string, std::vector<std::string>> alternative_hierarchy;  // object -> alternative parts
  std::map<std::string, EmbeddingOverride> overrides;                  // key -> anchored embedding
};

struct SynonymEntry {
  std::string name;
  double target_cos = 1.0;
  torch::Tensor vec;  // unit norm, length D_e
};

// Deterministic text-encoder stand-in: a seeded random projection of the
// character-trigram bag of each category key, renormalized. Synonyms and
// overrides are injected with a configured cosine to their anchor vector.
class TextEmbeddingTable {
 public:
  TextEmbeddingTable() = default;

  static TextEmbeddingTable build(const CategoryTaxonomy& taxonomy, const EmbeddingSpec& spec,
                                  int64_t dim, uint64_t seed);

  int64_t dim() const { return dim_; }
  uint64_t seed() const { return seed_; }
  bool contains(const std::string& key) const;
  // Resolves canonical keys first, then synonym names. Throws LookupError.
  torch::Tensor vector_for(const std::string& key) const;
  const std::map<std::string, std::vector<SynonymEntry>>& synonym_map() const { return synonyms_; }
  const EmbeddingSpec& spec() const { return spec_; }
  void insert(const std::string& key, torch::Tensor vec);

  // Raw trigram-bag embedding for an arbitrary string under this table's seed.
  torch::Tensor raw_embedding(const std::string& text) const;

 private:
  int64_t dim_ = 0;
  uint64_t seed_ = 0;
  std::map<std::string, torch::Tensor> entries_;
  std::map<std::string, std::vector<SynonymEntry>> synonyms_;
  EmbeddingSpec spec_;
};

// encode_categories: row i is the unit embedding of keys[i]. (|keys| x D_e)
torch::Tensor encode_categories(const TextEmbeddingTable& table, const std::vector<std::string>& keys);

enum class PerturbKind { shuffle_objects, shuffle_parts, synonym_replace, hierarchy_replace };

struct HierarchyPerturbation {
  PerturbKind kind = PerturbKind::shuffle_parts;
  double fraction = 0.0;  // in [0, 1]
  uint64_t seed = 0;
};

PerturbKind perturb_kind_from_string(const std::string& s);
std::string to_string(PerturbKind kind);

// Appendix-style robustness perturbations; returns fresh copies and is
// deterministic under the perturbation seed.
std::pair<CategoryTaxonomy, TextEmbeddingTable> perturb(const CategoryTaxonomy& taxonomy,
                                                        const TextEmbeddingTable& table,
                                                        const HierarchyPerturbation& p);

// Hierarchy document (JSON key-value tree, see docs/formats.md).
CategoryTaxonomy parse_taxonomy(const ordered_json& document);
EmbeddingSpec parse_embedding_spec(const ordered_json& document);
ordered_json taxonomy_to_json(const CategoryTaxonomy& taxonomy);
CategoryTaxonomy load_taxonomy(const std::string& path);
ordered_json load_hierarchy_document(const std::string& path);

}  // namespace hopseg
