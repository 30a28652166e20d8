#include "hopseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

namespace fs = std::filesystem;

namespace hopseg {

namespace {

// ---- object templates ----
//
// Each object is a list of colored primitives in the unit square of its
// bounding box (y grows downward). A primitive carries both its coarse and
// fine part label, so the fine part sets strictly refine the coarse ones over
// identical object masks. Later primitives paint over earlier ones.

struct Primitive {
  enum class Shape { rect, disk, ellipse, triangle };
  Shape shape = Shape::rect;
  double cx = 0, cy = 0;  // center in the unit frame
  double ax = 0, ay = 0;  // half extents (rect/ellipse); disk uses ax as radius
  std::array<double, 6> tri{};  // triangle vertices x0,y0,x1,y1,x2,y2
  std::array<double, 3> color{};
  const char* coarse = "";
  const char* fine = "";
  int group = 0;  // same part name + different group => separate instances
};

Primitive rect(double cx, double cy, double ax, double ay, std::array<double, 3> c,
               const char* coarse, const char* fine, int group = 0) {
  Primitive p;
  p.shape = Primitive::Shape::rect;
  p.cx = cx; p.cy = cy; p.ax = ax; p.ay = ay;
  p.color = c; p.coarse = coarse; p.fine = fine; p.group = group;
  return p;
}

Primitive disk(double cx, double cy, double r, std::array<double, 3> c,
               const char* coarse, const char* fine, int group = 0) {
  Primitive p;
  p.shape = Primitive::Shape::disk;
  p.cx = cx; p.cy = cy; p.ax = r;
  p.color = c; p.coarse = coarse; p.fine = fine; p.group = group;
  return p;
}

Primitive ellipse(double cx, double cy, double ax, double ay, std::array<double, 3> c,
                  const char* coarse, const char* fine, int group = 0) {
  Primitive p;
  p.shape = Primitive::Shape::ellipse;
  p.cx = cx; p.cy = cy; p.ax = ax; p.ay = ay;
  p.color = c; p.coarse = coarse; p.fine = fine; p.group = group;
  return p;
}

Primitive triangle(std::array<double, 6> v, std::array<double, 3> c,
                   const char* coarse, const char* fine, int group = 0) {
  Primitive p;
  p.shape = Primitive::Shape::triangle;
  p.tri = v;
  p.color = c; p.coarse = coarse; p.fine = fine; p.group = group;
  return p;
}

struct ObjectTemplate {
  std::string category;
  std::vector<Primitive> prims;
};

const std::vector<ObjectTemplate>& object_templates() {
  static const std::vector<ObjectTemplate> kTemplates = [] {
    std::vector<ObjectTemplate> ts;

    const std::array<double, 3> kWheel{0.12, 0.12, 0.14};
    const std::array<double, 3> kWindow{0.55, 0.75, 0.95};
    const std::array<double, 3> kTail{0.45, 0.30, 0.18};

    ts.push_back({"car", {
        rect(0.20, 0.55, 0.14, 0.20, {0.85, 0.25, 0.20}, "body", "hood"),
        rect(0.50, 0.55, 0.15, 0.20, {0.75, 0.15, 0.15}, "body", "door"),
        rect(0.80, 0.55, 0.14, 0.20, {0.65, 0.10, 0.12}, "body", "trunk"),
        rect(0.50, 0.28, 0.22, 0.10, kWindow, "window", "window"),
        disk(0.09, 0.46, 0.055, {0.98, 0.90, 0.30}, "body", "headlight"),
        disk(0.28, 0.85, 0.10, kWheel, "wheel", "wheel", 0),
        disk(0.72, 0.85, 0.10, kWheel, "wheel", "wheel", 1),
    }});

    ts.push_back({"bus", {
        rect(0.16, 0.52, 0.14, 0.26, {0.95, 0.75, 0.20}, "body", "front"),
        rect(0.60, 0.52, 0.32, 0.26, {0.90, 0.65, 0.15}, "body", "rear"),
        rect(0.50, 0.22, 0.45, 0.06, {0.80, 0.55, 0.12}, "body", "roof"),
        rect(0.45, 0.42, 0.12, 0.07, kWindow, "window", "window", 0),
        rect(0.75, 0.42, 0.12, 0.07, kWindow, "window", "window", 1),
        rect(0.90, 0.58, 0.07, 0.20, {0.35, 0.30, 0.55}, "door", "door"),
        disk(0.22, 0.86, 0.09, kWheel, "wheel", "wheel", 0),
        disk(0.70, 0.86, 0.09, kWheel, "wheel", "wheel", 1),
    }});

    ts.push_back({"cat", {
        ellipse(0.60, 0.58, 0.34, 0.22, {0.60, 0.42, 0.25}, "body", "body"),
        disk(0.22, 0.34, 0.16, {0.70, 0.50, 0.30}, "head", "head"),
        triangle({0.10, 0.10, 0.20, 0.26, 0.04, 0.28}, {0.75, 0.55, 0.35}, "head", "ear", 0),
        triangle({0.34, 0.10, 0.40, 0.28, 0.24, 0.26}, {0.75, 0.55, 0.35}, "head", "ear", 1),
        rect(0.45, 0.84, 0.045, 0.08, {0.50, 0.34, 0.20}, "foot", "leg", 0),
        rect(0.45, 0.945, 0.055, 0.035, {0.35, 0.22, 0.12}, "foot", "paw", 0),
        rect(0.78, 0.84, 0.045, 0.08, {0.50, 0.34, 0.20}, "foot", "leg", 1),
        rect(0.78, 0.945, 0.055, 0.035, {0.35, 0.22, 0.12}, "foot", "paw", 1),
        rect(0.965, 0.45, 0.035, 0.22, kTail, "tail", "tail"),
    }});

    ts.push_back({"bird", {
        ellipse(0.55, 0.58, 0.30, 0.20, {0.30, 0.55, 0.80}, "body", "body"),
        disk(0.20, 0.32, 0.13, {0.35, 0.65, 0.90}, "head", "head"),
        triangle({0.02, 0.30, 0.10, 0.26, 0.10, 0.36}, {0.95, 0.70, 0.20}, "head", "beak"),
        triangle({0.45, 0.45, 0.80, 0.40, 0.60, 0.70}, {0.20, 0.40, 0.65}, "wing", "wing"),
        triangle({0.82, 0.52, 0.99, 0.40, 0.99, 0.66}, kTail, "tail", "tail"),
    }});

    ts.push_back({"truck", {
        rect(0.14, 0.50, 0.12, 0.22, {0.25, 0.60, 0.35}, "cab", "cab"),
        rect(0.62, 0.46, 0.34, 0.26, {0.60, 0.60, 0.58}, "cargo", "cargo"),
        rect(0.14, 0.36, 0.08, 0.06, kWindow, "window", "window"),
        disk(0.16, 0.86, 0.09, kWheel, "wheel", "wheel", 0),
        disk(0.52, 0.86, 0.09, kWheel, "wheel", "wheel", 1),
        disk(0.80, 0.86, 0.09, kWheel, "wheel", "wheel", 2),
    }});

    ts.push_back({"fish", {
        ellipse(0.48, 0.52, 0.30, 0.18, {0.85, 0.45, 0.60}, "body", "body"),
        disk(0.22, 0.52, 0.13, {0.90, 0.55, 0.68}, "head", "head"),
        triangle({0.40, 0.36, 0.62, 0.28, 0.58, 0.44}, {0.70, 0.30, 0.45}, "fin", "fin", 0),
        triangle({0.42, 0.66, 0.62, 0.76, 0.58, 0.60}, {0.70, 0.30, 0.45}, "fin", "fin", 1),
        triangle({0.76, 0.52, 0.98, 0.34, 0.98, 0.70}, kTail, "tail", "tail"),
    }});

    return ts;
  }();
  return kTemplates;
}

const ObjectTemplate& template_for(const std::string& category) {
  for (const auto& t : object_templates())
    if (t.category == category) return t;
  throw LookupError("no render template for object category: '" + category + "'");
}

const char* label_of(const Primitive& p, Granularity g) {
  return g == Granularity::coarse ? p.coarse : p.fine;
}

// Part names of one template in order of first appearance.
std::vector<std::string> template_parts(const ObjectTemplate& t, Granularity g) {
  std::vector<std::string> names;
  for (const auto& p : t.prims) {
    const std::string name = label_of(p, g);
    if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  }
  return names;
}

const std::map<std::string, std::string>& synonym_words() {
  static const std::map<std::string, std::string> kWords = {
      {"wheel", "tyre"},    {"window", "pane"},  {"door", "hatch"},   {"body", "torso"},
      {"head", "noggin"},   {"foot", "limb"},    {"tail", "caudal"},  {"hood", "bonnet"},
      {"trunk", "boot"},    {"headlight", "lamp"}, {"front", "nose"}, {"rear", "stern"},
      {"roof", "top"},      {"ear", "pinna"},    {"leg", "shank"},    {"paw", "pad"},
      {"beak", "bill"},     {"wing", "pinion"},  {"cab", "cabin"},    {"cargo", "bed"},
      {"fin", "flipper"},
  };
  return kWords;
}

const std::map<std::string, std::vector<std::string>>& alternative_parts() {
  static const std::map<std::string, std::vector<std::string>> kAlt = {
      {"car", {"engine", "mirror", "bumper"}},
      {"bus", {"engine", "mirror", "route sign"}},
      {"cat", {"whisker", "fur", "claw"}},
      {"bird", {"feather", "claw", "crest"}},
      {"truck", {"engine", "mirror", "axle"}},
      {"fish", {"scale", "gill", "eye"}},
  };
  return kAlt;
}

DatasetProfile make_profile(const std::string& name, const std::vector<std::string>& categories,
                            Granularity granularity) {
  ordered_json objects = ordered_json::object();
  ordered_json synonyms = ordered_json::object();
  ordered_json alternatives = ordered_json::object();
  for (const auto& category : categories) {
    const auto& t = template_for(category);
    const auto parts = template_parts(t, granularity);
    objects[category] = parts;
    for (const auto& part : parts) {
      auto it = synonym_words().find(part);
      const std::string word = it == synonym_words().end() ? part + "-alt" : it->second;
      const std::string key = CategoryTaxonomy::part_key(category, part);
      synonyms[key] = ordered_json::array(
          {{{"name", CategoryTaxonomy::part_key(category, word)}, {"target_cos", 0.9}}});
    }
    alternatives[category] = alternative_parts().at(category);
  }
  ordered_json doc;
  doc["objects"] = std::move(objects);
  doc["synonyms"] = std::move(synonyms);
  doc["alternative_hierarchy"] = std::move(alternatives);

  DatasetProfile profile;
  profile.name = name;
  profile.granularity = granularity;
  profile.document = std::move(doc);
  profile.taxonomy = parse_taxonomy(profile.document);
  profile.embedding_spec = parse_embedding_spec(profile.document);
  return profile;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

double box_iou(double ax, double ay, double as, double bx, double by, double bs) {
  const double ix = std::max(0.0, std::min(ax + as, bx + bs) - std::max(ax, bx));
  const double iy = std::max(0.0, std::min(ay + as, by + bs) - std::max(ay, by));
  const double inter = ix * iy;
  return inter / (as * as + bs * bs - inter);
}

bool primitive_contains(const Primitive& p, double u, double v) {
  switch (p.shape) {
    case Primitive::Shape::rect:
      return std::abs(u - p.cx) <= p.ax && std::abs(v - p.cy) <= p.ay;
    case Primitive::Shape::disk: {
      const double du = u - p.cx, dv = v - p.cy;
      return du * du + dv * dv <= p.ax * p.ax;
    }
    case Primitive::Shape::ellipse: {
      const double du = (u - p.cx) / p.ax, dv = (v - p.cy) / p.ay;
      return du * du + dv * dv <= 1.0;
    }
    case Primitive::Shape::triangle: {
      const double* t = p.tri.data();
      auto cross = [&](int i, int j) {
        return (t[2 * j] - t[2 * i]) * (v - t[2 * i + 1]) - (t[2 * j + 1] - t[2 * i + 1]) * (u - t[2 * i]);
      };
      const double c0 = cross(0, 1), c1 = cross(1, 2), c2 = cross(2, 0);
      const bool has_neg = c0 < 0 || c1 < 0 || c2 < 0;
      const bool has_pos = c0 > 0 || c1 > 0 || c2 > 0;
      return !(has_neg && has_pos);
    }
  }
  return false;
}

std::array<double, 4> tight_bbox(const torch::Tensor& mask) {
  const int64_t h = mask.size(0), w = mask.size(1);
  auto acc = mask.accessor<bool, 2>();
  int64_t x0 = w, x1 = -1, y0 = h, y1 = -1;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      if (acc[y][x]) {
        x0 = std::min(x0, x); x1 = std::max(x1, x);
        y0 = std::min(y0, y); y1 = std::max(y1, y);
      }
  if (x1 < 0) throw ValidationError("tight_bbox on an empty mask");
  return {static_cast<double>(x0 + x1 + 1) / (2.0 * static_cast<double>(w)),
          static_cast<double>(y0 + y1 + 1) / (2.0 * static_cast<double>(h)),
          static_cast<double>(x1 - x0 + 1) / static_cast<double>(w),
          static_cast<double>(y1 - y0 + 1) / static_cast<double>(h)};
}

std::string level_to_string(QueryLevel level) {
  return level == QueryLevel::object ? "object" : "part";
}

QueryLevel level_from_string(const std::string& s) {
  if (s == "object") return QueryLevel::object;
  if (s == "part") return QueryLevel::part;
  throw ValidationError("unknown annotation level: '" + s + "'");
}

std::string image_file_name(int64_t id) {
  std::ostringstream oss;
  oss.width(8);
  oss.fill('0');
  oss << id;
  return oss.str() + ".png";
}

// Drops unseen keys from a profile document (objects, synonyms, alternatives,
// overrides) and reparses; used to build the training side of zero-shot splits.
DatasetProfile filter_unseen(const DatasetProfile& profile) {
  const auto& tax = profile.taxonomy;
  ordered_json objects = ordered_json::object();
  std::set<std::string> kept_keys;
  for (const auto& object : tax.objects) {
    if (!tax.is_seen(object)) continue;
    kept_keys.insert(object);
    ordered_json parts = ordered_json::array();
    for (const auto& part : tax.hierarchy.at(object)) {
      const std::string key = CategoryTaxonomy::part_key(object, part);
      if (!tax.is_seen(key)) continue;
      kept_keys.insert(key);
      parts.push_back(part);
    }
    objects[object] = std::move(parts);
  }
  ordered_json doc;
  doc["objects"] = std::move(objects);
  if (profile.document.contains("synonyms")) {
    ordered_json synonyms = ordered_json::object();
    for (auto it = profile.document.at("synonyms").begin();
         it != profile.document.at("synonyms").end(); ++it)
      if (kept_keys.count(it.key())) synonyms[it.key()] = it.value();
    doc["synonyms"] = std::move(synonyms);
  }
  if (profile.document.contains("alternative_hierarchy")) {
    ordered_json alternatives = ordered_json::object();
    for (auto it = profile.document.at("alternative_hierarchy").begin();
         it != profile.document.at("alternative_hierarchy").end(); ++it)
      if (kept_keys.count(it.key())) alternatives[it.key()] = it.value();
    doc["alternative_hierarchy"] = std::move(alternatives);
  }
  if (profile.document.contains("embedding_overrides")) {
    ordered_json overrides = ordered_json::object();
    for (auto it = profile.document.at("embedding_overrides").begin();
         it != profile.document.at("embedding_overrides").end(); ++it) {
      const std::string like = it.value().at("like").get<std::string>();
      if (kept_keys.count(it.key()) && kept_keys.count(like)) overrides[it.key()] = it.value();
    }
    doc["embedding_overrides"] = std::move(overrides);
  }

  DatasetProfile out = profile;
  out.document = std::move(doc);
  out.taxonomy = parse_taxonomy(out.document);
  out.embedding_spec = parse_embedding_spec(out.document);
  return out;
}

}  // namespace

// ---- profiles ----

DatasetProfile coarse_world_profile() {
  return make_profile("coarse-world", {"car", "bus", "cat", "bird"}, Granularity::coarse);
}

DatasetProfile fine_world_profile() {
  return make_profile("fine-world", {"car", "bus", "cat", "bird", "truck", "fish"},
                      Granularity::fine);
}

const std::string& zero_shot_unseen_key() {
  static const std::string kKey = CategoryTaxonomy::part_key("bird", "tail");
  return kKey;
}

DatasetProfile coarse_world_zero_shot_profile() {
  DatasetProfile profile = coarse_world_profile();
  profile.name = "coarse-world-zs";
  // mark bird's tail unseen and anchor its embedding to the trained cat's tail
  auto& parts = profile.document.at("objects").at("bird");
  for (auto& entry : parts)
    if (entry.is_string() && entry.get<std::string>() == "tail")
      entry = ordered_json{{"name", "tail"}, {"unseen", true}};
  profile.document["embedding_overrides"] = {
      {zero_shot_unseen_key(),
       {{"like", CategoryTaxonomy::part_key("cat", "tail")}, {"target_cos", 0.9}}}};
  profile.taxonomy = parse_taxonomy(profile.document);
  profile.embedding_spec = parse_embedding_spec(profile.document);
  return profile;
}

DatasetProfile profile_by_name(const std::string& name) {
  if (name == "coarse-world") return coarse_world_profile();
  if (name == "fine-world") return fine_world_profile();
  if (name == "coarse-world-zs") return coarse_world_zero_shot_profile();
  throw LookupError("unknown dataset profile: '" + name + "'");
}

// ---- scene generation ----

SceneSample generate_scene(const DatasetProfile& profile, int64_t n_objects, uint64_t seed) {
  if (n_objects < 1) throw std::invalid_argument("generate_scene: n_objects must be >= 1");
  const int64_t h = profile.render.height, w = profile.render.width;
  std::mt19937_64 rng(mix_seeds(seed, fnv1a(profile.name)));

  // background with mild quantized noise
  std::vector<uint8_t> canvas(static_cast<size_t>(h * w * 3));
  for (auto& c : canvas) {
    const double v = std::clamp(0.92 + uniform(rng, -profile.render.noise, profile.render.noise), 0.0, 1.0);
    c = static_cast<uint8_t>(std::lround(v * 255.0));
  }

  struct Placed {
    std::string category;
    double x, y, side;
    std::array<double, 3> jitter;
    std::vector<std::pair<std::string, int>> part_slots;  // canonical (name, group) order
  };
  std::vector<Placed> placed;
  const double min_dim = static_cast<double>(std::min(h, w));
  for (int64_t i = 0; i < n_objects; ++i) {
    Placed obj;
    obj.category = profile.taxonomy.objects[rng() % profile.taxonomy.objects.size()];
    for (auto& j : obj.jitter) j = uniform(rng, -0.05, 0.05);
    bool ok = false;
    for (int64_t attempt = 0; attempt < profile.render.max_place_attempts; ++attempt) {
      obj.side = std::floor(uniform(rng, 0.40, 0.52) * min_dim);
      obj.x = std::floor(uniform(rng, 0.0, static_cast<double>(w) - obj.side));
      obj.y = std::floor(uniform(rng, 0.0, static_cast<double>(h) - obj.side));
      ok = true;
      for (const auto& other : placed)
        if (box_iou(obj.x, obj.y, obj.side, other.x, other.y, other.side) > profile.render.max_overlap) {
          ok = false;
          break;
        }
      if (ok) break;
    }
    if (!ok)
      throw ValidationError("generate_scene: could not place object " + std::to_string(i + 1) +
                            " of " + std::to_string(n_objects) + " without excessive overlap");

    const auto& tmpl = template_for(obj.category);
    for (const auto& prim : tmpl.prims) {
      const std::pair<std::string, int> slot{label_of(prim, profile.granularity), prim.group};
      if (std::find(obj.part_slots.begin(), obj.part_slots.end(), slot) == obj.part_slots.end())
        obj.part_slots.push_back(slot);
    }
    placed.push_back(std::move(obj));
  }

  // paint; later objects occlude earlier ones
  std::vector<int32_t> obj_owner(static_cast<size_t>(h * w), -1);
  std::vector<int32_t> slot_owner(static_cast<size_t>(h * w), -1);
  for (size_t o = 0; o < placed.size(); ++o) {
    const auto& obj = placed[o];
    const auto& tmpl = template_for(obj.category);
    for (const auto& prim : tmpl.prims) {
      const std::pair<std::string, int> slot{label_of(prim, profile.granularity), prim.group};
      const auto slot_it = std::find(obj.part_slots.begin(), obj.part_slots.end(), slot);
      const auto slot_idx = static_cast<int32_t>(slot_it - obj.part_slots.begin());

      const int64_t px0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(obj.x)));
      const int64_t py0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(obj.y)));
      const int64_t px1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(obj.x + obj.side)));
      const int64_t py1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(obj.y + obj.side)));
      for (int64_t py = py0; py <= py1; ++py) {
        for (int64_t px = px0; px <= px1; ++px) {
          const double u = (static_cast<double>(px) + 0.5 - obj.x) / obj.side;
          const double v = (static_cast<double>(py) + 0.5 - obj.y) / obj.side;
          if (u < 0 || u > 1 || v < 0 || v > 1 || !primitive_contains(prim, u, v)) continue;
          const size_t pix = static_cast<size_t>(py * w + px);
          obj_owner[pix] = static_cast<int32_t>(o);
          slot_owner[pix] = slot_idx;
          for (int c = 0; c < 3; ++c) {
            const double value = std::clamp(prim.color[static_cast<size_t>(c)] +
                                            obj.jitter[static_cast<size_t>(c)], 0.0, 1.0);
            canvas[pix * 3 + static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(value * 255.0));
          }
        }
      }
    }
  }

  // collect visible masks; fully occluded instances are dropped
  SceneSample sample;
  // low seed bits as a provisional id; instance ids are id * 1000 + local index
  sample.id = static_cast<int64_t>(seed & 0xffffffffULL);
  sample.image = torch::empty({3, h, w}, torch::kFloat32);
  {
    auto acc = sample.image.accessor<float, 3>();
    for (int64_t py = 0; py < h; ++py)
      for (int64_t px = 0; px < w; ++px)
        for (int64_t c = 0; c < 3; ++c)
          acc[c][py][px] = static_cast<float>(canvas[static_cast<size_t>((py * w + px) * 3 + c)]) / 255.0f;
  }

  int64_t next_local = 0;
  for (size_t o = 0; o < placed.size(); ++o) {
    const auto& obj = placed[o];
    auto object_mask = torch::zeros({h, w}, torch::kBool);
    std::vector<torch::Tensor> slot_masks(obj.part_slots.size());
    for (auto& m : slot_masks) m = torch::zeros({h, w}, torch::kBool);
    {
      auto om = object_mask.accessor<bool, 2>();
      std::vector<at::TensorAccessor<bool, 2>> slot_acc;
      slot_acc.reserve(slot_masks.size());
      for (auto& m : slot_masks) slot_acc.push_back(m.accessor<bool, 2>());
      for (int64_t py = 0; py < h; ++py)
        for (int64_t px = 0; px < w; ++px) {
          const size_t pix = static_cast<size_t>(py * w + px);
          if (obj_owner[pix] != static_cast<int32_t>(o)) continue;
          om[py][px] = true;
          slot_acc[static_cast<size_t>(slot_owner[pix])][py][px] = true;
        }
    }
    if (!object_mask.any().item<bool>()) continue;

    InstanceAnnotation object_ann;
    object_ann.instance_id = sample.id * 1000 + (++next_local);
    object_ann.category_key = obj.category;
    object_ann.level = QueryLevel::object;
    object_ann.mask = object_mask;
    object_ann.bbox = tight_bbox(object_mask);
    const int64_t parent = object_ann.instance_id;
    sample.instances.push_back(std::move(object_ann));

    for (size_t s = 0; s < obj.part_slots.size(); ++s) {
      if (!slot_masks[s].any().item<bool>()) continue;
      InstanceAnnotation part_ann;
      part_ann.instance_id = sample.id * 1000 + (++next_local);
      part_ann.category_key = CategoryTaxonomy::part_key(obj.category, obj.part_slots[s].first);
      part_ann.level = QueryLevel::part;
      part_ann.parent_id = parent;
      part_ann.mask = slot_masks[s];
      part_ann.bbox = tight_bbox(slot_masks[s]);
      sample.instances.push_back(std::move(part_ann));
    }
  }
  return sample;
}

// ---- RLE ----

std::vector<int64_t> rle_encode(const torch::Tensor& mask) {
  if (mask.dim() != 2) throw std::invalid_argument("rle_encode expects a (H, W) mask");
  const int64_t h = mask.size(0), w = mask.size(1);
  auto converted = mask.to(torch::kBool).contiguous();
  auto acc = converted.accessor<bool, 2>();
  std::vector<int64_t> counts;
  bool current = false;  // runs start with zeros
  int64_t run = 0;
  for (int64_t x = 0; x < w; ++x)
    for (int64_t y = 0; y < h; ++y) {
      const bool value = acc[y][x];
      if (value == current) {
        ++run;
      } else {
        counts.push_back(run);
        current = value;
        run = 1;
      }
    }
  counts.push_back(run);
  return counts;
}

torch::Tensor rle_decode(const std::vector<int64_t>& counts, int64_t height, int64_t width) {
  if (height <= 0 || width <= 0) throw ValidationError("rle_decode: non-positive mask size");
  int64_t total = 0;
  for (int64_t c : counts) {
    if (c < 0) throw ValidationError("rle_decode: negative run length");
    total += c;
  }
  if (total != height * width)
    throw ValidationError("rle_decode: counts sum to " + std::to_string(total) + ", expected " +
                          std::to_string(height * width));
  auto mask = torch::zeros({height, width}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  int64_t pos = 0;
  bool current = false;
  for (int64_t c : counts) {
    for (int64_t i = 0; i < c; ++i, ++pos)
      if (current) acc[pos % height][pos / height] = true;
    current = !current;
  }
  return mask;
}

// ---- annotation files ----

void write_annotations(const std::vector<SceneSample>& samples, const DatasetProfile& profile,
                       const std::string& path) {
  const fs::path ann_path(path);
  const fs::path image_dir = ann_path.parent_path() / "images";
  fs::create_directories(image_dir);

  ordered_json doc;
  doc["profile"] = profile.name;
  doc["hierarchy"] = profile.document;
  doc["images"] = ordered_json::array();
  doc["annotations"] = ordered_json::array();

  for (const auto& sample : samples) {
    const int64_t height = sample.image.size(1), width = sample.image.size(2);
    const std::string file_name = image_file_name(sample.id);
    doc["images"].push_back({{"id", sample.id},
                             {"file_name", file_name},
                             {"height", height},
                             {"width", width}});

    cv::Mat bgr(static_cast<int>(height), static_cast<int>(width), CV_8UC3);
    auto acc = sample.image.accessor<float, 3>();
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        auto& px = bgr.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
        for (int c = 0; c < 3; ++c)
          px[2 - c] = static_cast<uint8_t>(std::lround(acc[c][y][x] * 255.0f));
      }
    if (!cv::imwrite((image_dir / file_name).string(), bgr))
      throw ValidationError("failed to write image " + (image_dir / file_name).string());

    for (const auto& inst : sample.instances) {
      ordered_json ann;
      ann["id"] = inst.instance_id;
      ann["image_id"] = sample.id;
      ann["category_key"] = inst.category_key;
      ann["level"] = level_to_string(inst.level);
      ann["parent_id"] = inst.parent_id;
      ann["bbox"] = inst.bbox;
      ann["segmentation"] = {{"size", {inst.mask.size(0), inst.mask.size(1)}},
                             {"counts", rle_encode(inst.mask)}};
      doc["annotations"].push_back(std::move(ann));
    }
  }

  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open annotation file for writing: " + path);
  out << doc.dump(1) << "\n";
}

DatasetFile read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open annotation file: " + path);
  ordered_json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed annotation file: ") + e.what());
  }

  DatasetFile file;
  file.profile_name = doc.value("profile", "");
  if (doc.contains("hierarchy")) file.hierarchy = doc.at("hierarchy");

  const fs::path image_dir = fs::path(path).parent_path() / "images";
  std::map<int64_t, size_t> sample_of_image;
  for (const auto& img : doc.at("images")) {
    SceneSample sample;
    sample.id = img.at("id").get<int64_t>();
    const std::string file_name = img.at("file_name").get<std::string>();
    cv::Mat bgr = cv::imread((image_dir / file_name).string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw ValidationError("cannot read image " + (image_dir / file_name).string());
    const int64_t height = img.at("height").get<int64_t>(), width = img.at("width").get<int64_t>();
    if (bgr.rows != height || bgr.cols != width)
      throw ValidationError("image size mismatch for " + file_name);
    sample.image = torch::empty({3, height, width}, torch::kFloat32);
    auto acc = sample.image.accessor<float, 3>();
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        const auto& px = bgr.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
        for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>(px[2 - c]) / 255.0f;
      }
    sample_of_image[sample.id] = file.samples.size();
    file.samples.push_back(std::move(sample));
  }

  std::map<int64_t, int64_t> object_image;  // object annotation id -> image id
  for (const auto& ann : doc.at("annotations")) {
    const int64_t image_id = ann.at("image_id").get<int64_t>();
    auto it = sample_of_image.find(image_id);
    if (it == sample_of_image.end())
      throw ValidationError("annotation " + std::to_string(ann.at("id").get<int64_t>()) +
                            " references unknown image " + std::to_string(image_id));
    SceneSample& sample = file.samples[it->second];

    InstanceAnnotation inst;
    inst.instance_id = ann.at("id").get<int64_t>();
    inst.category_key = ann.at("category_key").get<std::string>();
    inst.level = level_from_string(ann.at("level").get<std::string>());
    inst.parent_id = ann.value("parent_id", static_cast<int64_t>(-1));
    const auto bbox = ann.at("bbox").get<std::vector<double>>();
    if (bbox.size() != 4) throw ValidationError("annotation bbox must have 4 entries");
    std::copy(bbox.begin(), bbox.end(), inst.bbox.begin());
    const auto& seg = ann.at("segmentation");
    const auto size = seg.at("size").get<std::vector<int64_t>>();
    if (size.size() != 2) throw ValidationError("segmentation size must be [height, width]");
    inst.mask = rle_decode(seg.at("counts").get<std::vector<int64_t>>(), size[0], size[1]);
    if (size[0] != sample.image.size(1) || size[1] != sample.image.size(2))
      throw ValidationError("mask size mismatch for annotation " + std::to_string(inst.instance_id));

    if (inst.level == QueryLevel::object) {
      object_image[inst.instance_id] = image_id;
    } else {
      auto parent = object_image.find(inst.parent_id);
      if (parent == object_image.end() || parent->second != image_id)
        throw ValidationError("part annotation " + std::to_string(inst.instance_id) +
                              " has orphan parent_id " + std::to_string(inst.parent_id));
    }
    sample.instances.push_back(std::move(inst));
  }
  return file;
}

std::vector<SceneSample> read_annotations(const std::string& path) {
  return read_dataset(path).samples;
}

// ---- splits ----

Protocol protocol_from_string(const std::string& s) {
  if (s == "in_domain") return Protocol::in_domain;
  if (s == "cross_dataset") return Protocol::cross_dataset;
  if (s == "zero_shot") return Protocol::zero_shot;
  throw ValidationError("unknown split protocol: '" + s + "'");
}

std::string to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::in_domain: return "in_domain";
    case Protocol::cross_dataset: return "cross_dataset";
    case Protocol::zero_shot: return "zero_shot";
  }
  return "?";
}

SplitManifest make_splits(const DatasetProfile& train_profile, const DatasetProfile& eval_profile,
                          Protocol protocol, int64_t n_train, int64_t n_eval, uint64_t seed) {
  if (n_train < 1 || n_eval < 1) throw std::invalid_argument("make_splits: counts must be >= 1");
  if (protocol == Protocol::in_domain && train_profile.name != eval_profile.name)
    throw ValidationError("in_domain split requires one profile on both sides");
  if (protocol == Protocol::cross_dataset && train_profile.name == eval_profile.name)
    throw ValidationError("cross_dataset split requires two distinct profiles");

  SplitManifest manifest;
  manifest.protocol = protocol;
  manifest.train_profile = train_profile.name;
  manifest.eval_profile = eval_profile.name;
  manifest.seed = seed;
  for (int64_t i = 0; i < n_train; ++i) manifest.train_ids.push_back(1 + i);
  for (int64_t i = 0; i < n_eval; ++i) manifest.eval_ids.push_back(1000001 + i);

  if (protocol == Protocol::zero_shot) {
    for (const auto& key : eval_profile.taxonomy.all_keys())
      if (!eval_profile.taxonomy.is_seen(key)) manifest.unseen_keys.push_back(key);
    if (manifest.unseen_keys.empty())
      throw ValidationError("zero_shot split requires unseen-flagged keys in the eval profile");
  }
  return manifest;
}

void write_manifest(const SplitManifest& manifest, const std::string& path) {
  ordered_json doc;
  doc["protocol"] = to_string(manifest.protocol);
  doc["train_profile"] = manifest.train_profile;
  doc["eval_profile"] = manifest.eval_profile;
  doc["seed"] = manifest.seed;
  doc["train_ids"] = manifest.train_ids;
  doc["eval_ids"] = manifest.eval_ids;
  doc["unseen_keys"] = manifest.unseen_keys;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open manifest for writing: " + path);
  out << doc.dump(1) << "\n";
}

SplitManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path);
  ordered_json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  SplitManifest manifest;
  manifest.protocol = protocol_from_string(doc.at("protocol").get<std::string>());
  manifest.train_profile = doc.at("train_profile").get<std::string>();
  manifest.eval_profile = doc.at("eval_profile").get<std::string>();
  manifest.seed = doc.at("seed").get<uint64_t>();
  manifest.train_ids = doc.at("train_ids").get<std::vector<int64_t>>();
  manifest.eval_ids = doc.at("eval_ids").get<std::vector<int64_t>>();
  manifest.unseen_keys = doc.value("unseen_keys", std::vector<std::string>{});
  return manifest;
}

std::vector<SceneSample> filter_seen(const std::vector<SceneSample>& samples,
                                     const CategoryTaxonomy& taxonomy) {
  std::vector<SceneSample> out;
  out.reserve(samples.size());
  for (const auto& sample : samples) {
    SceneSample kept;
    kept.id = sample.id;
    kept.image = sample.image;
    std::set<int64_t> dropped_parents;
    for (const auto& inst : sample.instances) {
      bool seen = true;
      if (taxonomy.seen_flags.count(inst.category_key))
        seen = taxonomy.is_seen(inst.category_key);
      // keys absent from the taxonomy are treated as unseen as well
      else
        seen = false;
      if (inst.level == QueryLevel::part && dropped_parents.count(inst.parent_id)) seen = false;
      if (!seen) {
        if (inst.level == QueryLevel::object) dropped_parents.insert(inst.instance_id);
        continue;
      }
      kept.instances.push_back(inst);
    }
    out.push_back(std::move(kept));
  }
  return out;
}

void materialize_dataset(const SplitManifest& manifest, const std::string& out_dir,
                         int64_t min_objects, int64_t max_objects) {
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("materialize_dataset: invalid object count range");
  const DatasetProfile train_profile = profile_by_name(manifest.train_profile);
  const DatasetProfile eval_profile = profile_by_name(manifest.eval_profile);

  auto generate = [&](const DatasetProfile& profile, const std::vector<int64_t>& ids) {
    std::vector<SceneSample> samples;
    samples.reserve(ids.size());
    for (int64_t id : ids) {
      std::mt19937_64 rng(mix_seeds(manifest.seed, static_cast<uint64_t>(id)));
      const int64_t n = min_objects + static_cast<int64_t>(rng() % static_cast<uint64_t>(max_objects - min_objects + 1));
      samples.push_back(generate_scene(profile, n, mix_seeds(manifest.seed, static_cast<uint64_t>(id))));
      samples.back().id = id;
      // keep instance ids consistent with the (possibly remapped) image id
      for (size_t k = 0; k < samples.back().instances.size(); ++k) {
        auto& inst = samples.back().instances[k];
        const int64_t old_base = inst.instance_id - inst.instance_id % 1000;
        const int64_t local = inst.instance_id % 1000;
        inst.instance_id = id * 1000 + local;
        if (inst.parent_id >= 0) inst.parent_id = inst.parent_id - old_base + id * 1000;
      }
    }
    return samples;
  };

  fs::create_directories(fs::path(out_dir) / "train");
  fs::create_directories(fs::path(out_dir) / "eval");

  auto train_samples = generate(train_profile, manifest.train_ids);
  DatasetProfile train_doc_profile = train_profile;
  if (manifest.protocol == Protocol::zero_shot) {
    train_doc_profile = filter_unseen(train_profile);
    train_samples = filter_seen(train_samples, train_profile.taxonomy);
  }
  write_annotations(train_samples, train_doc_profile, (fs::path(out_dir) / "train" / "annotations.json").string());

  auto eval_samples = generate(eval_profile, manifest.eval_ids);
  write_annotations(eval_samples, eval_profile, (fs::path(out_dir) / "eval" / "annotations.json").string());

  write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
}

}  // namespace hopseg
