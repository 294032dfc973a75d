#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "qpm/config.hpp"
#include "qpm/data.hpp"
#include "qpm/model.hpp"
#include "qpm/retrieval.hpp"
#include "qpm/training.hpp"

namespace qpm {

/// Synthetic data from the config, or the directory it points at.
ReidDataset load_dataset(const DataConfig& cfg, LoadReport* report = nullptr);

struct TrainedModel {
  std::unique_ptr<QpmModel> model;
  std::vector<EpochMetrics> history;
  double seconds = 0.0;
};

/// Builds a model sized for the training identities and trains it.
TrainedModel train_model(ExperimentConfig cfg, const ReidDataset& data,
                         std::ostream* log = nullptr);

/// Indexes query and gallery, then evaluates. `n == 0` re-ranks the whole
/// gallery.
EvalReport evaluate_model(const QpmModel& model, const ReidDataset& data, RetrievalConfig cfg,
                          const ImageSpec& spec);

/// One row of the component ablation: what is trained and how it is scored.
struct AblationVariant {
  std::string label;
  /// Rows with the same key share one trained model.
  std::string training_key;
  bool use_quality = true;
  bool use_isa = true;
  GlobalMode global_mode = GlobalMode::agfe;
  LossToggles losses;
  /// Part-distance weight at test time; negative keeps the configured gamma.
  double gamma = -1.0;
  /// Stage-2 depth; 0 re-ranks the whole gallery, negative keeps the config.
  int n = -1;
};

/// Baseline, Baseline(+triplet), Part branch, GAP global, GAP global(+ISA),
/// AGFE global, AGFE global(+ISA), QPM.
std::vector<AblationVariant> ablation_variants();

/// Model and loss switches of a variant applied to a base config.
ExperimentConfig apply_variant(ExperimentConfig base, const AblationVariant& v);
RetrievalConfig variant_retrieval(const RetrievalConfig& base, const AblationVariant& v);

struct AblationRow {
  AblationVariant variant;
  EvalReport report;
};

/// Trains each distinct configuration once and evaluates every row.
/// `labels` selects a subset of rows (empty = all). Progress goes to `log`.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const ReidDataset& data,
                                      const std::vector<std::string>& labels = {},
                                      std::ostream* log = nullptr);

}  // namespace qpm
