#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qpm/data.hpp"
#include "qpm/model.hpp"

namespace qpm {

struct EraseParams {
  double probability = 0.5;
  double area_min = 0.02;  ///< erased area as a fraction of the image
  double area_max = 0.4;
  double aspect_min = 0.3;  ///< height / width of the rectangle
  double aspect_max = 3.3;
  double fill = 0.0;  ///< value written into every channel (normalised space)

  void validate() const;
};

/// Which of the five objective terms are optimised.
struct LossToggles {
  bool part_id = true;
  bool part_tp = true;
  bool global_id = true;
  bool sg_id = true;
  bool global_tp = true;
};

struct TrainConfig {
  int P = 8;  ///< identities per batch
  int A = 8;  ///< images per identity
  int epochs = 70;
  double base_lr = 0.01;
  double lr_decay_factor = 0.1;
  int lr_decay_period = 20;
  double margin = 0.3;
  /// 0 gives plain SGD. No weight decay is applied.
  double momentum = 0.0;
  double flip_probability = 0.5;
  EraseParams erase;
  LossToggles losses;
  /// Keep the p == g terms of the pairwise identity loss.
  bool sg_include_diagonal = true;
  /// 0 means max(1, training images / batch size).
  int iterations_per_epoch = 0;
  std::uint64_t seed = 0;
  /// Where a diagnostic JSON is written if the loss diverges ("" = none).
  std::string diagnostics_path;

  int batch_size() const { return P * A; }
  void validate() const;
};

/// base_lr * factor^floor(epoch / period), epochs counted from 0.
double learning_rate(const TrainConfig& cfg, int epoch);

/// Sample positions grouped by identity, in first-appearance order.
class IdentityIndex {
 public:
  explicit IdentityIndex(std::span<const int> labels);
  const std::vector<int>& identities() const { return ids_; }
  const std::vector<int>& images(int id) const { return groups_.at(id); }

 private:
  std::vector<int> ids_;
  std::map<int, std::vector<int>> groups_;
};

/// P distinct identities x A positions each, grouped by identity. Identities
/// with fewer than A images are sampled with replacement.
std::vector<int> pk_sample(const IdentityIndex& index, int P, int A, std::mt19937_64& rng);

struct EraseRegion {
  int x = 0, y = 0, width = 0, height = 0;
};

/// With probability p, fills a random rectangle of a [C,H,W] tensor.
std::optional<EraseRegion> random_erase(Tensor& chw, const EraseParams& params,
                                        std::mt19937_64& rng);
void horizontal_flip(Tensor& chw);

struct LossBreakdown {
  double part_id = 0.0;
  double part_tp = 0.0;
  double global_id = 0.0;
  double sg_id = 0.0;
  double global_tp = 0.0;
  double total = 0.0;

  double sum() const { return part_id + part_tp + global_id + sg_id + global_tp; }
};

/// Differentiable terms; disabled or inapplicable terms stay undefined.
struct LossTerms {
  Var part_id, part_tp, global_id, sg_id, global_tp;
  Var total;

  LossBreakdown values() const;
};

/// The joint objective with unit weights. Global terms require a global mode;
/// the attention identity term additionally requires attention to be on.
/// `labels` are contiguous class indices.
LossTerms compute_losses(const QpmModel& model, const ModelOutputs& out,
                         std::span<const int> labels, const TrainConfig& cfg);

/// Global feature of each image for the single-image modes (gap, si): [N,C'].
Var single_image_global(GlobalMode mode, const Var& global_parts, const Var& q);

class SgdOptimizer {
 public:
  SgdOptimizer(ParameterStore& store, double momentum);
  /// w -= lr * v with v = momentum * v + grad. Parameters without a gradient
  /// are left untouched.
  void step(double lr);
  void zero_grad() { store_.zero_grad(); }

 private:
  ParameterStore& store_;
  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  ///< mean over the epoch's iterations
  int iterations = 0;
  double seconds = 0.0;
};

/// Maps dataset identities to classifier rows in order of first appearance.
std::map<int, int> contiguous_labels(std::span<const ReidSample> samples);

/// Single-threaded, seed-deterministic training loop.
class Trainer {
 public:
  Trainer(QpmModel& model, const TrainConfig& cfg, std::span<const ReidSample> train,
          const ImageSpec& spec);

  /// Forward, backward and one SGD step on the given sample positions.
  LossBreakdown step(std::span<const int> batch, double lr);
  EpochMetrics run_epoch(int epoch);
  /// All epochs; writes one JSON object per epoch to `log` when given.
  std::vector<EpochMetrics> fit(std::ostream* log = nullptr,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

  /// Normalised, augmented batch [N,3,H,W] for the given positions.
  Tensor make_batch(std::span<const int> batch);
  const std::vector<int>& labels() const { return labels_; }
  int iterations_per_epoch() const;

 private:
  const Tensor& base_tensor(int i);
  [[noreturn]] void diverged(int iteration, double lr, const LossBreakdown& loss) const;

  QpmModel& model_;
  TrainConfig cfg_;
  std::span<const ReidSample> train_;
  ImageSpec spec_;
  std::vector<int> labels_;
  IdentityIndex index_;
  SgdOptimizer optimizer_;
  std::mt19937_64 sample_rng_;
  std::mt19937_64 augment_rng_;
  std::vector<Tensor> cache_;
  bool use_cache_ = false;
  int epoch_ = 0;
  int iteration_ = -1;
};

}  // namespace qpm
