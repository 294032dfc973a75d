// qpm: train, index, search and evaluate quality-aware part models.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "qpm/checkpoint.hpp"
#include "qpm/config.hpp"
#include "qpm/error.hpp"
#include "qpm/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qpm;

namespace {

struct CommonOptions {
  std::string config_path;
  std::string preset = "paper";
  std::optional<std::uint64_t> seed;
  std::optional<int> n;
  std::optional<double> gamma;
  std::optional<int> parts;
  std::optional<int> embed_dim;
  std::optional<int> epochs;
  std::vector<std::string> toggles;
  std::optional<std::string> protocol;
  std::optional<std::string> data_root;
};

/// preset (or checkpoint metadata) <- config file <- command-line flags.
ExperimentConfig resolve(const CommonOptions& o, const json* meta = nullptr) {
  ExperimentConfig cfg;
  if (meta && meta->contains("config")) {
    cfg = experiment_from_json(meta->at("config"));
  } else if (o.preset == "desk") {
    cfg = desk_scale_config();
  } else if (o.preset != "paper") {
    throw ConfigError("unknown preset '" + o.preset + "' (expected paper|desk)");
  }
  if (!o.config_path.empty()) cfg = load_experiment_config(o.config_path, cfg);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.model.init_seed = *o.seed;
  }
  if (o.n) cfg.retrieval.n = *o.n;
  if (o.gamma) cfg.retrieval.gamma = *o.gamma;
  if (o.parts) cfg.model.backbone.parts = *o.parts;
  if (o.embed_dim) cfg.model.embed_dim = *o.embed_dim;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  for (const auto& t : o.toggles) apply_toggle(cfg, t);
  if (o.protocol) cfg.retrieval.protocol = protocol_from_string(*o.protocol);
  if (o.data_root) cfg.data.root = *o.data_root;
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json report_json(const EvalReport& r) {
  return {{"rank1", r.rank1},
          {"rank5", r.rank5},
          {"rank10", r.rank10},
          {"mAP", r.mAP},
          {"queries", r.queries},
          {"valid_queries", r.valid_queries},
          {"skipped_queries", r.skipped_queries},
          {"cmc", r.cmc}};
}

void write_cmc_csv(const fs::path& path, const EvalReport& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "rank,cmc\n";
  for (std::size_t k = 0; k < r.cmc.size(); ++k) out << k + 1 << ',' << r.cmc[k] << '\n';
}

const std::vector<ReidSample>& split_of(const ReidDataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "query") return d.query;
  if (split == "gallery") return d.gallery;
  throw ConfigError("unknown split '" + split + "' (expected train|query|gallery)");
}

int cmd_synth(const CommonOptions& o, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  cfg.data.synth.validate();
  const ReidDataset data = synth_generate(cfg.data.synth);
  write_reid_dir(data, out);
  write_json(fs::path(out) / "synth_config.json", to_json(cfg.data));
  std::cout << "wrote " << data.train.size() << " train, " << data.query.size() << " query, "
            << data.gallery.size() << " gallery images to " << out << '\n';
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& out, std::string log_path,
              const std::string& pretrained) {
  ExperimentConfig cfg = resolve(o);
  LoadReport rep;
  const ReidDataset data = load_dataset(cfg.data, &rep);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  cfg.model.num_classes = std::max(1, static_cast<int>(contiguous_labels(data.train).size()));
  if (cfg.train.diagnostics_path.empty()) cfg.train.diagnostics_path = out + ".diverged.json";
  cfg.validate();
  QpmModel model(cfg.model);
  if (!pretrained.empty()) {
    std::cout << "loaded " << load_pretrained_backbone(model, pretrained)
              << " backbone tensors from " << pretrained << '\n';
  }
  if (log_path.empty()) log_path = out + ".log.jsonl";
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write " + log_path);
  Trainer trainer(model, cfg.train, data.train, cfg.image_spec());
  trainer.fit(&log, [](const EpochMetrics& m) {
    std::cout << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.loss.total << " ("
              << m.seconds << " s)\n"
              << std::flush;
  });
  save_checkpoint(out, model, json{{"config", to_json(cfg)}});
  std::cout << "checkpoint written to " << out << '\n';
  return 0;
}

struct LoadedModel {
  std::unique_ptr<QpmModel> model;
  ExperimentConfig cfg;
};

LoadedModel load_for_inference(const CommonOptions& o, const std::string& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  LoadedModel lm{load_model(ckpt), resolve(o, &ckpt.meta)};
  lm.cfg.model = ckpt.model;
  lm.cfg.retrieval.validate();
  return lm;
}

int cmd_index(const CommonOptions& o, const std::string& checkpoint, const std::string& split,
              const std::string& out) {
  const LoadedModel lm = load_for_inference(o, checkpoint);
  const ReidDataset data = load_dataset(lm.cfg.data);
  const FeatureIndex index = index_images(*lm.model, split_of(data, split), lm.cfg.image_spec());
  write_features(out, index);
  std::cout << "indexed " << index.records.size() << " images into " << out << '\n';
  return 0;
}

int cmd_search(const CommonOptions& o, const std::string& checkpoint, const std::string& queries,
               const std::string& gallery, int query_index, int top, const std::string& out) {
  const LoadedModel lm = load_for_inference(o, checkpoint);
  const FeatureIndex q = read_features(queries);
  const FeatureIndex g = read_features(gallery);
  if (q.parts != g.parts || q.embed_dim != g.embed_dim || q.channels != g.channels) {
    throw FormatError("query and gallery dumps have different dimensions");
  }
  json results = json::array();
  const int first = query_index < 0 ? 0 : query_index;
  const int last = query_index < 0 ? static_cast<int>(q.records.size()) : query_index + 1;
  if (first >= static_cast<int>(q.records.size())) throw ConfigError("query index out of range");
  for (int i = first; i < last; ++i) {
    const RankingResult r = search(q.records[i], g.records, lm.cfg.retrieval, lm.model->config().global_mode);
    json ranked = json::array();
    const int shown = std::min<int>(top, static_cast<int>(r.order.size()));
    for (int k = 0; k < shown; ++k) {
      const int idx = r.order[k];
      json e = {{"gallery_index", idx},
                {"id", g.records[idx].id},
                {"cam", g.records[idx].cam},
                {"part_distance", r.stage1[idx]}};
      if (k < r.n) e["final_distance"] = r.final_distances[k];
      ranked.push_back(e);
    }
    results.push_back({{"query_index", i},
                       {"id", q.records[i].id},
                       {"cam", q.records[i].cam},
                       {"global_evaluations", r.global_evaluations},
                       {"ranking", ranked}});
  }
  const json doc = {{"results", results}, {"config", to_json(lm.cfg)}};
  if (out.empty()) {
    std::cout << doc.dump(2) << '\n';
  } else {
    write_json(out, doc);
  }
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& queries,
             const std::string& gallery, const std::string& out, const std::string& csv) {
  const LoadedModel lm = load_for_inference(o, checkpoint);
  const GlobalMode mode = lm.model->config().global_mode;
  EvalReport rep;
  if (!queries.empty() || !gallery.empty()) {
    if (queries.empty() || gallery.empty()) {
      throw ConfigError("--queries and --gallery must be given together");
    }
    const FeatureIndex q = read_features(queries), g = read_features(gallery);
    rep = evaluate(q.records, g.records, lm.cfg.retrieval, mode);
  } else {
    const ReidDataset data = load_dataset(lm.cfg.data);
    rep = evaluate_model(*lm.model, data, lm.cfg.retrieval, lm.cfg.image_spec());
  }
  json doc = report_json(rep);
  doc["config"] = to_json(lm.cfg);
  write_json(out, doc);
  const std::string csv_path = csv.empty() ? fs::path(out).replace_extension(".cmc.csv").string() : csv;
  write_cmc_csv(csv_path, rep);
  std::printf("rank1 %.4f  rank5 %.4f  rank10 %.4f  mAP %.4f  (%zu queries, %zu skipped)\n",
              rep.rank1, rep.rank5, rep.rank10, rep.mAP, rep.valid_queries, rep.skipped_queries);
  return 0;
}

cv::Mat quality_overlay(const cv::Mat& image, const std::vector<double>& q, int scale) {
  cv::Mat big;
  cv::resize(image, big, image.size() * scale, 0, 0, cv::INTER_NEAREST);
  const int bar = 10 * scale / 2 + 4;
  cv::Mat canvas(big.rows, big.cols + bar, CV_8UC3, cv::Scalar(255, 255, 255));
  big.copyTo(canvas(cv::Rect(0, 0, big.cols, big.rows)));
  const int k = static_cast<int>(q.size());
  for (int i = 0; i < k; ++i) {
    const int y0 = i * big.rows / k, y1 = (i + 1) * big.rows / k;
    // Red for low scores, green for high ones.
    const cv::Scalar color(0, 255 * q[i], 255 * (1.0 - q[i]));
    cv::rectangle(canvas, cv::Rect(big.cols, y0, bar, y1 - y0), color, cv::FILLED);
    if (i > 0) cv::line(canvas, {0, y0}, {big.cols - 1, y0}, cv::Scalar(255, 255, 255), 1);
    char label[16];
    std::snprintf(label, sizeof label, "%.2f", q[i]);
    cv::putText(canvas, label, {2, y0 + 12}, cv::FONT_HERSHEY_PLAIN, 0.8, cv::Scalar(0, 0, 0), 2);
    cv::putText(canvas, label, {2, y0 + 12}, cv::FONT_HERSHEY_PLAIN, 0.8,
                cv::Scalar(255, 255, 255), 1);
  }
  return canvas;
}

cv::Mat attention_overlay(const cv::Mat& image, const Tensor& attention, int offset, int h, int w,
                          int scale) {
  cv::Mat m(h, w, CV_64F);
  std::copy(attention.data() + offset, attention.data() + offset + h * w, m.ptr<double>());
  cv::Mat big, heat, img;
  m.convertTo(m, CV_8U, 255.0);
  cv::resize(m, big, image.size() * scale, 0, 0, cv::INTER_LINEAR);
  cv::applyColorMap(big, heat, cv::COLORMAP_JET);
  cv::resize(image, img, image.size() * scale, 0, 0, cv::INTER_NEAREST);
  cv::Mat out;
  cv::addWeighted(img, 0.5, heat, 0.5, 0.0, out);
  return out;
}

int cmd_viz(const CommonOptions& o, const std::string& checkpoint, const std::string& split,
            const std::string& out, int limit) {
  const LoadedModel lm = load_for_inference(o, checkpoint);
  const ReidDataset data = load_dataset(lm.cfg.data);
  const auto& samples = split_of(data, split);
  const int count = std::min<int>(limit, static_cast<int>(samples.size()));
  const ImageSpec spec = lm.cfg.image_spec();
  const int k = lm.model->config().parts();
  fs::create_directories(out);
  std::ofstream csv(fs::path(out) / "quality.csv");
  csv << "index,id,cam,occluder";
  for (int i = 0; i < k; ++i) csv << ",q" << i;
  for (int i = 0; i < k; ++i) csv << ",occluded_fraction" << i;
  csv << '\n';
  NoGradGuard guard;
  for (int s = 0; s < count; ++s) {
    const cv::Mat pixels = sample_pixels(samples[s]);
    Tensor t = to_tensor(pixels, spec);
    Tensor batch = t.reshaped({1, 3, spec.height, spec.width});
    const ModelOutputs res = lm.model->forward(Var(std::move(batch)), Mode::eval);
    IsaOutputs isa = res.isa;
    if (!isa.attention.defined() && lm.model->config().use_isa) {
      isa = lm.model->attention().forward(res.feature_map, res.part.q, true);
    }
    const std::vector<double> q(res.part.q.value().values().begin(), res.part.q.value().values().end());
    cv::Mat shown;
    cv::resize(pixels, shown, cv::Size(spec.width, spec.height));
    char name[64];
    std::snprintf(name, sizeof name, "%05d_quality.png", s);
    cv::imwrite((fs::path(out) / name).string(), quality_overlay(shown, q, 4));
    if (isa.attention.defined()) {
      const int h = isa.attention.dim(1), w = isa.attention.dim(2);
      std::snprintf(name, sizeof name, "%05d_attention.png", s);
      cv::imwrite((fs::path(out) / name).string(),
                  attention_overlay(shown, isa.attention.value(), 0, h, w, 4));
    }
    csv << s << ',' << samples[s].id << ',' << samples[s].cam << ','
        << to_string(samples[s].occluder);
    for (double v : q) csv << ',' << v;
    std::vector<double> occ(k, 0.0);
    if (!samples[s].mask.empty()) {
      cv::Mat mask;
      cv::resize(samples[s].mask, mask, cv::Size(spec.width, spec.height), 0, 0, cv::INTER_NEAREST);
      occ = part_occlusion_fractions(mask, k);
    }
    for (double v : occ) csv << ',' << v;
    csv << '\n';
  }
  std::cout << "wrote " << count << " visualisations to " << out << '\n';
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& out, const std::vector<std::string>& rows) {
  const ExperimentConfig cfg = resolve(o);
  cfg.validate();
  const ReidDataset data = load_dataset(cfg.data);
  const auto result = run_ablation(cfg, data, rows, &std::cout);
  json table = json::array();
  std::ofstream csv(fs::path(out).replace_extension(".csv"));
  csv << "row,rank1,rank5,rank10,mAP\n";
  for (const auto& r : result) {
    json row = report_json(r.report);
    row.erase("cmc");
    row["row"] = r.variant.label;
    table.push_back(row);
    csv << '"' << r.variant.label << "\"," << r.report.rank1 << ',' << r.report.rank5 << ','
        << r.report.rank10 << ',' << r.report.mAP << '\n';
  }
  write_json(out, {{"rows", table}, {"config", to_json(cfg)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quality-aware part models for occluded person re-identification"};
  app.require_subcommand(1);
  app.fallthrough();
  CommonOptions o;
  app.add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--preset", o.preset, "Base settings: paper or desk")->capture_default_str();
  app.add_option("--seed", o.seed, "Training and initialisation seed");
  app.add_option("--n", o.n, "Candidates re-ranked in stage 2");
  app.add_option("--gamma", o.gamma, "Part-distance weight of the final distance");
  app.add_option("--K", o.parts, "Number of horizontal parts");
  app.add_option("--d", o.embed_dim, "Part embedding dimension");
  app.add_option("--epochs", o.epochs, "Training epochs");
  app.add_option("--toggle", o.toggles, "NAME=on|off for a loss term, quality or isa");
  app.add_option("--protocol", o.protocol, "standard or partial");
  app.add_option("--data", o.data_root, "Dataset root (standard ReID layout)");

  std::string out, log_path, pretrained, checkpoint, split = "gallery", queries, gallery, csv;
  int query_index = -1, top = 10, limit = 16;
  std::vector<std::string> rows;

  auto* synth = app.add_subcommand("synth", "Write a synthetic occluded dataset");
  synth->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--log", log_path, "JSON-lines metrics log (default <out>.log.jsonl)");
  train->add_option("--pretrained", pretrained, "Checkpoint providing backbone weights");

  auto* index = app.add_subcommand("index", "Write a feature dump for one split");
  index->add_option("--checkpoint", checkpoint)->required();
  index->add_option("--split", split, "train, query or gallery")->capture_default_str();
  index->add_option("--out", out, "Feature dump path")->required();

  auto* search_cmd = app.add_subcommand("search", "Rank a gallery dump for query records");
  search_cmd->add_option("--checkpoint", checkpoint)->required();
  search_cmd->add_option("--queries", queries, "Query feature dump")->required();
  search_cmd->add_option("--gallery", gallery, "Gallery feature dump")->required();
  search_cmd->add_option("--query", query_index, "Single query index (default all)");
  search_cmd->add_option("--top", top, "Results listed per query")->capture_default_str();
  search_cmd->add_option("--out", out, "JSON output (default stdout)");

  auto* eval = app.add_subcommand("eval", "CMC and mAP of a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--queries", queries, "Query feature dump (default: index the dataset)");
  eval->add_option("--gallery", gallery, "Gallery feature dump");
  eval->add_option("--out", out, "JSON report path")->required();
  eval->add_option("--csv", csv, "CMC curve CSV (default <out>.cmc.csv)");

  auto* viz = app.add_subcommand("viz-quality", "Part-quality overlays and attention heat maps");
  viz->add_option("--checkpoint", checkpoint)->required();
  viz->add_option("--split", split, "train, query or gallery")->capture_default_str();
  viz->add_option("--out", out, "Output directory")->required();
  viz->add_option("--limit", limit, "Images to render")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the component ablation rows");
  ablate->add_option("--out", out, "JSON report path (a CSV is written next to it)")->required();
  ablate->add_option("--rows", rows, "Subset of row labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(o, out);
    if (*train) return cmd_train(o, out, log_path, pretrained);
    if (*index) return cmd_index(o, checkpoint, split, out);
    if (*search_cmd) return cmd_search(o, checkpoint, queries, gallery, query_index, top, out);
    if (*eval) return cmd_eval(o, checkpoint, queries, gallery, out, csv);
    if (*viz) return cmd_viz(o, checkpoint, split, out, limit);
    if (*ablate) return cmd_ablate(o, out, rows);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
