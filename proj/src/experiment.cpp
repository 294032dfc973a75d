#include "qpm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <map>

#include "qpm/error.hpp"

namespace qpm {

ReidDataset load_dataset(const DataConfig& cfg, LoadReport* report) {
  if (cfg.synthetic()) return synth_generate(cfg.synth);
  return load_reid_dir(cfg.root, cfg.load, report);
}

TrainedModel train_model(ExperimentConfig cfg, const ReidDataset& data, std::ostream* log) {
  const int classes = static_cast<int>(contiguous_labels(data.train).size());
  cfg.model.num_classes = std::max(1, classes);
  cfg.validate();
  TrainedModel out;
  out.model = std::make_unique<QpmModel>(cfg.model);
  const auto start = std::chrono::steady_clock::now();
  Trainer trainer(*out.model, cfg.train, data.train, cfg.image_spec());
  out.history = trainer.fit(log);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

EvalReport evaluate_model(const QpmModel& model, const ReidDataset& data, RetrievalConfig cfg,
                          const ImageSpec& spec) {
  if (data.query.empty() || data.gallery.empty()) throw DataError("query or gallery set is empty");
  const FeatureIndex queries = index_images(model, data.query, spec);
  const FeatureIndex gallery = index_images(model, data.gallery, spec);
  if (cfg.n == 0) cfg.n = static_cast<int>(gallery.records.size());
  return evaluate(queries.records, gallery.records, cfg, model.config().global_mode);
}

std::vector<AblationVariant> ablation_variants() {
  LossToggles id_only{true, false, false, false, false};
  LossToggles parts{true, true, false, false, false};
  LossToggles no_attention{true, true, false, true, true};
  LossToggles all{};
  return {
      {"Baseline", "baseline", false, false, GlobalMode::none, id_only, 1.0, -1},
      {"Baseline(+triplet)", "baseline_tp", false, false, GlobalMode::none, parts, 1.0, -1},
      {"Part branch", "part", true, false, GlobalMode::none, parts, 1.0, -1},
      {"GAP global", "gap", true, false, GlobalMode::gap, no_attention, 0.0, 0},
      {"GAP global(+ISA)", "gap_isa", true, true, GlobalMode::gap, all, 0.0, 0},
      {"AGFE global", "agfe", true, false, GlobalMode::agfe, no_attention, 0.0, 0},
      {"AGFE global(+ISA)", "agfe_isa", true, true, GlobalMode::agfe, all, 0.0, 0},
      {"QPM", "agfe_isa", true, true, GlobalMode::agfe, all, -1.0, -1},
  };
}

ExperimentConfig apply_variant(ExperimentConfig base, const AblationVariant& v) {
  base.model.use_quality = v.use_quality;
  base.model.use_isa = v.use_isa;
  base.model.global_mode = v.global_mode;
  base.train.losses = v.losses;
  return base;
}

RetrievalConfig variant_retrieval(const RetrievalConfig& base, const AblationVariant& v) {
  RetrievalConfig r = base;
  if (v.gamma >= 0.0) r.gamma = v.gamma;
  if (v.n >= 0) r.n = v.n;
  return r;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const ReidDataset& data,
                                      const std::vector<std::string>& labels, std::ostream* log) {
  std::vector<AblationVariant> rows;
  for (const auto& v : ablation_variants()) {
    if (labels.empty() || std::find(labels.begin(), labels.end(), v.label) != labels.end()) {
      rows.push_back(v);
    }
  }
  for (const auto& l : labels) {
    if (std::none_of(rows.begin(), rows.end(), [&](const auto& v) { return v.label == l; })) {
      throw ConfigError("unknown ablation row '" + l + "'");
    }
  }
  std::map<std::string, TrainedModel> trained;
  std::vector<AblationRow> out;
  for (const auto& v : rows) {
    auto it = trained.find(v.training_key);
    if (it == trained.end()) {
      if (log) *log << "training " << v.training_key << '\n' << std::flush;
      it = trained.emplace(v.training_key, train_model(apply_variant(base, v), data)).first;
    }
    AblationRow row{v, evaluate_model(*it->second.model, data, variant_retrieval(base.retrieval, v),
                                      base.image_spec())};
    if (log) {
      *log << v.label << ": rank1=" << row.report.rank1 << " mAP=" << row.report.mAP << '\n'
           << std::flush;
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace qpm
