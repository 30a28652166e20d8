#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "hopseg/decoder.hpp"
#include "hopseg/taxonomy.hpp"

namespace hopseg {

struct InstanceAnnotation {
  int64_t instance_id = -1;
  std::string category_key;
  QueryLevel level = QueryLevel::object;
  int64_t parent_id = -1;              // -1 for objects
  std::array<double, 4> bbox{};        // normalized cxcywh, tight box of the mask
  torch::Tensor mask;                  // bool (H, W), nonempty
};

struct SceneSample {
  int64_t id = 0;
  torch::Tensor image;  // (3, H, W) float in [0,1], quantized to k/255
  std::vector<InstanceAnnotation> instances;
};

struct RenderParams {
  int64_t height = 96;
  int64_t width = 96;
  int64_t max_place_attempts = 50;
  double max_overlap = 0.2;   // max IoU between placed object boxes
  double noise = 0.015;       // background noise amplitude
};

enum class Granularity { coarse, fine };

struct DatasetProfile {
  std::string name;
  Granularity granularity = Granularity::coarse;
  ordered_json document;       // full hierarchy document (taxonomy + embedding blocks)
  CategoryTaxonomy taxonomy;
  EmbeddingSpec embedding_spec;
  RenderParams render;
};

// Built-in profiles. "coarse-world" has 4 object classes with 3-4 parts each;
// "fine-world" refines their part sets (6+ parts) and adds 2 novel objects.
DatasetProfile coarse_world_profile();
DatasetProfile fine_world_profile();
// coarse-world with one part key held unseen and anchored at cosine 0.9 to a
// trained sibling key.
DatasetProfile coarse_world_zero_shot_profile();
DatasetProfile profile_by_name(const std::string& name);
const std::string& zero_shot_unseen_key();

// Renders composed geometric objects with exact masks and parent links.
// Deterministic under (profile, n_objects, seed).
SceneSample generate_scene(const DatasetProfile& profile, int64_t n_objects, uint64_t seed);

// Run-length encoding of binary masks: uncompressed counts, column-major,
// first count is the number of leading zeros (see docs/formats.md).
std::vector<int64_t> rle_encode(const torch::Tensor& mask);
torch::Tensor rle_decode(const std::vector<int64_t>& counts, int64_t height, int64_t width);

// COCO-style annotation file with parent_id links and a hierarchy block.
// Images are stored as PNGs next to the annotation file (exact round-trip:
// pixel values are multiples of 1/255).
void write_annotations(const std::vector<SceneSample>& samples, const DatasetProfile& profile,
                       const std::string& path);

struct DatasetFile {
  std::vector<SceneSample> samples;
  ordered_json hierarchy;  // the hierarchy document stored with the annotations
  std::string profile_name;
};

DatasetFile read_dataset(const std::string& path);
std::vector<SceneSample> read_annotations(const std::string& path);

enum class Protocol { in_domain, cross_dataset, zero_shot };
Protocol protocol_from_string(const std::string& s);
std::string to_string(Protocol protocol);

struct SplitManifest {
  Protocol protocol = Protocol::in_domain;
  std::string train_profile, eval_profile;
  std::vector<int64_t> train_ids, eval_ids;
  uint64_t seed = 0;
  std::vector<std::string> unseen_keys;  // zero-shot: keys absent from training annotations
};

// in_domain: train/eval from one profile; cross_dataset: train on the first
// profile, eval on the second; zero_shot: unseen-flagged keys are excluded
// from training annotations but kept in the eval taxonomy.
SplitManifest make_splits(const DatasetProfile& train_profile, const DatasetProfile& eval_profile,
                          Protocol protocol, int64_t n_train, int64_t n_eval, uint64_t seed);

// Generates the dataset described by a manifest into out_dir (train/ and
// eval/ subdirectories with annotation files, plus manifest.json).
void materialize_dataset(const SplitManifest& manifest, const std::string& out_dir,
                         int64_t min_objects = 1, int64_t max_objects = 2);

SplitManifest read_manifest(const std::string& path);
void write_manifest(const SplitManifest& manifest, const std::string& path);

// Removes instances of unseen categories from a sample list (the training-side
// filter of the zero-shot protocol); uses CategoryTaxonomy::is_seen.
std::vector<SceneSample> filter_seen(const std::vector<SceneSample>& samples,
                                     const CategoryTaxonomy& taxonomy);

}  // namespace hopseg
