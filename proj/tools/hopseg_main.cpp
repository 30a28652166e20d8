// hopseg command-line interface: dataset generation, training, evaluation,
// single-image inference and robustness ablations.
//
// Exit codes: 0 success, 1 invalid input (schema/validation), 2 usage or
// internal error.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "hopseg/data.hpp"
#include "hopseg/evaluation.hpp"
#include "hopseg/model.hpp"
#include "hopseg/training.hpp"

namespace fs = std::filesystem;
using hopseg::ordered_json;

namespace {

struct TableSpec {
  int64_t dim = 32;
  uint64_t seed = 17;
};

hopseg::TextEmbeddingTable build_table(const ordered_json& hierarchy, const TableSpec& spec,
                                       hopseg::CategoryTaxonomy* taxonomy_out) {
  auto taxonomy = hopseg::parse_taxonomy(hierarchy);
  auto embed_spec = hopseg::parse_embedding_spec(hierarchy);
  if (taxonomy_out) *taxonomy_out = taxonomy;
  return hopseg::TextEmbeddingTable::build(taxonomy, embed_spec, spec.dim, spec.seed);
}

TableSpec table_spec_from_extra(const ordered_json& extra) {
  TableSpec spec;
  spec.dim = extra.value("embedding_dim", static_cast<int64_t>(32));
  spec.seed = extra.value("embedding_seed", static_cast<uint64_t>(17));
  return spec;
}

torch::Tensor read_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw hopseg::ValidationError("cannot read image: " + path);
  auto image = torch::empty({3, bgr.rows, bgr.cols}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>(px[2 - c]) / 255.0f;
    }
  return image;
}

void write_image(const torch::Tensor& image, const std::string& path) {
  const int64_t h = image.size(1), w = image.size(2);
  cv::Mat bgr(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  auto acc = image.accessor<float, 3>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      auto& px = bgr.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x));
      for (int c = 0; c < 3; ++c)
        px[2 - c] = static_cast<uint8_t>(std::lround(std::clamp(acc[c][y][x], 0.0f, 1.0f) * 255.0f));
    }
  if (!cv::imwrite(path, bgr)) throw hopseg::ValidationError("failed to write image: " + path);
}

const std::array<std::array<float, 3>, 8>& palette() {
  static const std::array<std::array<float, 3>, 8> kColors = {{{0.90f, 0.10f, 0.10f},
                                                               {0.10f, 0.70f, 0.20f},
                                                               {0.15f, 0.30f, 0.95f},
                                                               {0.95f, 0.75f, 0.10f},
                                                               {0.70f, 0.20f, 0.80f},
                                                               {0.10f, 0.80f, 0.80f},
                                                               {0.95f, 0.45f, 0.10f},
                                                               {0.55f, 0.35f, 0.20f}}};
  return kColors;
}

// Blends part masks and paints object box borders on a copy of the image.
torch::Tensor render_overlay(const torch::Tensor& image, const hopseg::SceneInference& inference,
                             const std::vector<std::string>& part_keys, double score_threshold) {
  auto out = image.clone();
  const int64_t h = out.size(1), w = out.size(2);
  auto acc = out.accessor<float, 3>();

  auto parts = inference.parts.predictions.size() > 0
                   ? hopseg::to_eval_instances(inference.parts.predictions, part_keys, h, w)
                   : std::vector<hopseg::EvalInstance>{};
  for (size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].score < score_threshold) continue;
    const auto& color = palette()[k % palette().size()];
    auto mask = parts[k].mask.accessor<bool, 2>();
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        if (mask[y][x])
          for (int c = 0; c < 3; ++c)
            acc[c][y][x] = 0.5f * acc[c][y][x] + 0.5f * color[static_cast<size_t>(c)];
  }

  // object boxes as 1px borders
  auto boxes = inference.objects.predictions.boxes.to(torch::kFloat64);
  for (size_t r = 0; r < inference.retained_rows.size(); ++r) {
    const int64_t row = inference.retained_rows[r];
    const double cx = boxes[row][0].item<double>() * static_cast<double>(w);
    const double cy = boxes[row][1].item<double>() * static_cast<double>(h);
    const double bw = boxes[row][2].item<double>() * static_cast<double>(w);
    const double bh = boxes[row][3].item<double>() * static_cast<double>(h);
    const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(cx - bw / 2), 0, w - 1);
    const int64_t x1 = std::clamp<int64_t>(static_cast<int64_t>(cx + bw / 2), 0, w - 1);
    const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(cy - bh / 2), 0, h - 1);
    const int64_t y1 = std::clamp<int64_t>(static_cast<int64_t>(cy + bh / 2), 0, h - 1);
    const auto& color = palette()[r % palette().size()];
    for (int64_t x = x0; x <= x1; ++x)
      for (int64_t y : {y0, y1})
        for (int c = 0; c < 3; ++c) acc[c][y][x] = color[static_cast<size_t>(c)];
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x : {x0, x1})
        for (int c = 0; c < 3; ++c) acc[c][y][x] = color[static_cast<size_t>(c)];
  }
  return out;
}

int run_gen_data(const std::string& out_dir, const std::string& protocol_name,
                 std::string train_profile, std::string eval_profile, int64_t n_train,
                 int64_t n_eval, uint64_t seed, int64_t min_objects, int64_t max_objects) {
  const auto protocol = hopseg::protocol_from_string(protocol_name);
  if (train_profile.empty())
    train_profile = protocol == hopseg::Protocol::zero_shot ? "coarse-world-zs" : "coarse-world";
  if (eval_profile.empty()) {
    switch (protocol) {
      case hopseg::Protocol::in_domain: eval_profile = train_profile; break;
      case hopseg::Protocol::cross_dataset: eval_profile = "fine-world"; break;
      case hopseg::Protocol::zero_shot: eval_profile = train_profile; break;
    }
  }
  auto manifest = hopseg::make_splits(hopseg::profile_by_name(train_profile),
                                      hopseg::profile_by_name(eval_profile), protocol, n_train,
                                      n_eval, seed);
  hopseg::materialize_dataset(manifest, out_dir, min_objects, max_objects);
  std::cout << "wrote " << n_train << " train / " << n_eval << " eval scenes to " << out_dir
            << " (protocol " << protocol_name << ")\n";
  return 0;
}

int run_train(const std::string& data_dir, const std::string& out_dir, int64_t epochs,
              int64_t stage1_epochs, bool one_stage, double lr, uint64_t seed,
              const std::string& parser_mode, bool detach, int64_t layers, int64_t repeats,
              uint64_t embedding_seed, const std::string& loss_csv) {
  auto dataset = hopseg::read_dataset((fs::path(data_dir) / "train" / "annotations.json").string());
  TableSpec tspec;
  tspec.seed = embedding_seed;
  hopseg::CategoryTaxonomy taxonomy;
  auto table = build_table(dataset.hierarchy, tspec, &taxonomy);

  hopseg::ModelConfig config;
  config.parser.mode = hopseg::parser_mode_from_string(parser_mode);
  config.decoder.layers = layers;
  config.n_part_repeats = repeats;
  config.detach_object_queries = detach;

  torch::manual_seed(seed);
  hopseg::HopsegModel model(config);

  hopseg::TrainOptions options;
  options.epochs = epochs;
  options.stage1_epochs = stage1_epochs;
  options.two_stage = !one_stage;
  options.lr = lr;
  options.seed = seed;
  auto log = hopseg::train_model(model, dataset.samples, taxonomy, table, options);

  ordered_json extra;
  extra["embedding_dim"] = tspec.dim;
  extra["embedding_seed"] = tspec.seed;
  extra["hierarchy"] = dataset.hierarchy;
  extra["train"] = {{"epochs", epochs},
                    {"stage1_epochs", stage1_epochs},
                    {"two_stage", !one_stage},
                    {"lr", lr},
                    {"seed", seed},
                    {"n_scenes", dataset.samples.size()}};
  hopseg::save_checkpoint(model, extra, out_dir);
  const std::string csv = loss_csv.empty() ? (fs::path(out_dir) / "loss.csv").string() : loss_csv;
  hopseg::write_loss_csv(log, csv);
  std::cout << "trained " << log.size() << " steps; final loss " << (log.empty() ? 0.0 : log.back().loss)
            << "; checkpoint in " << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& data_dir, const std::string& ckpt_dir, const std::string& out_json,
             const std::string& out_csv, const std::string& split) {
  auto [model, extra] = hopseg::load_checkpoint(ckpt_dir);
  auto dataset =
      hopseg::read_dataset((fs::path(data_dir) / split / "annotations.json").string());
  hopseg::CategoryTaxonomy taxonomy;
  auto table = build_table(dataset.hierarchy, table_spec_from_extra(extra), &taxonomy);

  auto report = hopseg::evaluate_model(model, dataset.samples, taxonomy, table);
  if (!out_json.empty()) {
    std::ofstream out(out_json);
    if (!out) throw hopseg::ValidationError("cannot open report for writing: " + out_json);
    out << hopseg::report_to_json(report).dump(1) << "\n";
  }
  if (!out_csv.empty()) hopseg::write_report_csv(report, out_csv);
  std::cout << "images " << report.n_images << "\n"
            << "object AP " << report.object_ap.ap << " (AP50 " << report.object_ap.ap50 << ")\n"
            << "part AP " << report.part_ap.ap << " (AP50 " << report.part_ap.ap50 << ")\n"
            << "part mIoU " << report.part_miou.miou << " (seen " << report.miou_seen << ", unseen "
            << report.miou_unseen << ", hIoU " << report.hiou_value << ")\n"
            << "attention score " << report.attention << "\n";
  return 0;
}

int run_infer(const std::string& ckpt_dir, const std::string& image_path,
              const std::string& hierarchy_path, const std::string& out_png,
              const std::string& out_json, double score_threshold) {
  auto [model, extra] = hopseg::load_checkpoint(ckpt_dir);
  ordered_json hierarchy = hierarchy_path.empty() ? extra.at("hierarchy")
                                                  : hopseg::load_hierarchy_document(hierarchy_path);
  hopseg::CategoryTaxonomy taxonomy;
  auto table = build_table(hierarchy, table_spec_from_extra(extra), &taxonomy);

  auto image = read_image(image_path);
  if (image.size(1) % 32 != 0 || image.size(2) % 32 != 0)
    throw hopseg::ValidationError("image height and width must be divisible by 32");
  auto inference = model->infer(image, taxonomy, table);

  if (!out_png.empty())
    write_image(render_overlay(image, inference, taxonomy.all_part_keys(), score_threshold), out_png);

  if (!out_json.empty()) {
    const int64_t h = image.size(1), w = image.size(2);
    ordered_json doc;
    doc["objects"] = ordered_json::array();
    auto object_instances = hopseg::to_eval_instances(inference.objects.predictions,
                                                      taxonomy.objects, h, w);
    for (size_t r = 0; r < inference.retained_rows.size(); ++r) {
      const auto& inst = object_instances[static_cast<size_t>(inference.retained_rows[r])];
      doc["objects"].push_back({{"category", inference.retained_categories[r]},
                                {"score", inst.score},
                                {"segmentation",
                                 {{"size", {h, w}}, {"counts", hopseg::rle_encode(inst.mask)}}}});
    }
    doc["parts"] = ordered_json::array();
    auto part_keys = taxonomy.all_part_keys();
    if (!part_keys.empty() && inference.parts.predictions.size() > 0) {
      auto part_instances = hopseg::to_eval_instances(inference.parts.predictions, part_keys, h, w);
      for (size_t k = 0; k < part_instances.size(); ++k) {
        if (part_instances[k].score < score_threshold) continue;
        const auto& prov = inference.parts.predictions.provenance[k];
        doc["parts"].push_back({{"category", part_instances[k].category_key},
                                {"score", part_instances[k].score},
                                {"object_index", prov.object_index},
                                {"query_key", prov.part_key},
                                {"segmentation",
                                 {{"size", {h, w}},
                                  {"counts", hopseg::rle_encode(part_instances[k].mask)}}}});
      }
    }
    std::ofstream out(out_json);
    if (!out) throw hopseg::ValidationError("cannot open output for writing: " + out_json);
    out << doc.dump(1) << "\n";
  }
  std::cout << "retained " << inference.retained_rows.size() << " objects, "
            << inference.parts.predictions.size() << " part queries\n";
  return 0;
}

int run_ablate(const std::string& data_dir, const std::string& ckpt_dir, const std::string& kind_name,
               const std::vector<double>& fractions, int64_t trials, uint64_t seed,
               const std::string& out_json) {
  auto [model, extra] = hopseg::load_checkpoint(ckpt_dir);
  auto dataset = hopseg::read_dataset((fs::path(data_dir) / "eval" / "annotations.json").string());
  hopseg::CategoryTaxonomy taxonomy;
  auto table = build_table(dataset.hierarchy, table_spec_from_extra(extra), &taxonomy);

  const auto kind = hopseg::perturb_kind_from_string(kind_name);
  std::vector<hopseg::SweepPoint> points;
  if (kind == hopseg::PerturbKind::synonym_replace || kind == hopseg::PerturbKind::hierarchy_replace)
    points = hopseg::fraction_sweep(model, dataset.samples, taxonomy, table, kind, fractions, seed);
  else
    points = hopseg::shuffle_trials(model, dataset.samples, taxonomy, table, kind, trials, seed);

  ordered_json doc;
  doc["kind"] = kind_name;
  doc["points"] = ordered_json::array();
  for (const auto& point : points) {
    doc["points"].push_back({{"fraction", point.fraction},
                             {"seed", point.seed},
                             {"report", hopseg::report_to_json(point.report)}});
    std::cout << kind_name << " fraction " << point.fraction << " seed " << point.seed
              << ": part AP " << point.report.part_ap.ap << ", part mIoU "
              << point.report.part_miou.miou << "\n";
  }
  if (!out_json.empty()) {
    std::ofstream out(out_json);
    if (!out) throw hopseg::ValidationError("cannot open output for writing: " + out_json);
    out << doc.dump(1) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"open-vocabulary object-part instance segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset split");
  std::string gen_out, gen_protocol = "in_domain", gen_train_profile, gen_eval_profile;
  int64_t gen_n_train = 200, gen_n_eval = 50, gen_min_objects = 1, gen_max_objects = 2;
  uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--protocol", gen_protocol, "in_domain | cross_dataset | zero_shot");
  gen->add_option("--train-profile", gen_train_profile, "dataset profile for the train split");
  gen->add_option("--eval-profile", gen_eval_profile, "dataset profile for the eval split");
  gen->add_option("--n-train", gen_n_train, "number of training scenes");
  gen->add_option("--n-eval", gen_n_eval, "number of evaluation scenes");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--min-objects", gen_min_objects, "minimum objects per scene");
  gen->add_option("--max-objects", gen_max_objects, "maximum objects per scene");

  // train
  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  std::string train_data, train_out, train_parser = "mllm", train_loss_csv;
  int64_t train_epochs = 20, train_stage1 = 6, train_layers = 3, train_repeats = 3;
  bool train_one_stage = false, train_detach = false;
  double train_lr = 1e-3;
  uint64_t train_seed = 0, train_embed_seed = 17;
  train->add_option("--data", train_data, "dataset directory (from gen-data)")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--epochs", train_epochs, "total epochs");
  train->add_option("--stage1-epochs", train_stage1, "object-only warm-up epochs");
  train->add_flag("--one-stage", train_one_stage, "joint objective from the first step");
  train->add_option("--lr", train_lr, "Adam learning rate");
  train->add_option("--seed", train_seed, "training seed");
  train->add_option("--parser", train_parser, "mllm | qformer | no_hierarchy");
  train->add_flag("--detach", train_detach, "detach object queries from the part losses");
  train->add_option("--layers", train_layers, "decoder layers L");
  train->add_option("--repeats", train_repeats, "part query repeats N_p");
  train->add_option("--embedding-seed", train_embed_seed, "text embedding seed");
  train->add_option("--loss-csv", train_loss_csv, "loss log path (default <out>/loss.csv)");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_data, eval_ckpt, eval_json, eval_csv, eval_split = "eval";
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--out", eval_json, "metric report JSON path");
  eval->add_option("--csv", eval_csv, "metric report CSV path");
  eval->add_option("--split", eval_split, "dataset split subdirectory (train | eval)");

  // infer
  auto* infer = app.add_subcommand("infer", "run inference on one image");
  std::string infer_ckpt, infer_image, infer_hierarchy, infer_png, infer_json;
  double infer_threshold = 0.5;
  infer->add_option("--ckpt", infer_ckpt, "checkpoint directory")->required();
  infer->add_option("--image", infer_image, "input PNG (sides divisible by 32)")->required();
  infer->add_option("--hierarchy", infer_hierarchy,
                    "hierarchy document (default: the one stored in the checkpoint)");
  infer->add_option("--out", infer_png, "overlay PNG path");
  infer->add_option("--json", infer_json, "instance JSON path");
  infer->add_option("--threshold", infer_threshold, "score threshold for reported parts");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "taxonomy robustness sweeps on the eval split");
  std::string ablate_data, ablate_ckpt, ablate_kind = "synonym_replace", ablate_json;
  std::vector<double> ablate_fractions = {0.0, 0.5, 1.0};
  int64_t ablate_trials = 3;
  uint64_t ablate_seed = 11;
  ablate->add_option("--data", ablate_data, "dataset directory")->required();
  ablate->add_option("--ckpt", ablate_ckpt, "checkpoint directory")->required();
  ablate->add_option("--kind", ablate_kind,
                     "shuffle_objects | shuffle_parts | synonym_replace | hierarchy_replace");
  ablate->add_option("--fractions", ablate_fractions, "replacement fractions (replace kinds)");
  ablate->add_option("--trials", ablate_trials, "number of trials (shuffle kinds)");
  ablate->add_option("--seed", ablate_seed, "perturbation seed");
  ablate->add_option("--out", ablate_json, "sweep report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed())
      return run_gen_data(gen_out, gen_protocol, gen_train_profile, gen_eval_profile, gen_n_train,
                          gen_n_eval, gen_seed, gen_min_objects, gen_max_objects);
    if (train->parsed())
      return run_train(train_data, train_out, train_epochs, train_stage1, train_one_stage, train_lr,
                       train_seed, train_parser, train_detach, train_layers, train_repeats,
                       train_embed_seed, train_loss_csv);
    if (eval->parsed()) return run_eval(eval_data, eval_ckpt, eval_json, eval_csv, eval_split);
    if (infer->parsed())
      return run_infer(infer_ckpt, infer_image, infer_hierarchy, infer_png, infer_json,
                       infer_threshold);
    if (ablate->parsed())
      return run_ablate(ablate_data, ablate_ckpt, ablate_kind, ablate_fractions, ablate_trials,
                        ablate_seed, ablate_json);
  } catch (const hopseg::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
