#pragma once

#include <random>
#include <span>
#include <vector>

#include "qpm/nn.hpp"

namespace qpm {

/// Guard added to the cosine and quality-weighted denominators.
inline constexpr double kDistanceEps = 1e-8;

/// Pooled (z) and embedded (f) vectors of one stripe. Part indices are 0-based.
struct PartDescriptor {
  std::vector<double> z;
  std::vector<double> f;
  int part_index = 0;
};

/// Region average pooling: per-channel mean of a [C,h,w] stripe.
std::vector<double> rap(const Tensor& stripe);

/// 1 - cos(a, b), with kDistanceEps in the denominator. Range [0, 2].
double cosine_distance(std::span<const double> a, std::span<const double> b);

std::vector<double> part_cosine_distances(std::span<const PartDescriptor> a,
                                          std::span<const PartDescriptor> b);
/// Same, over flattened [K,d] embeddings.
std::vector<double> part_cosine_distances(std::span<const double> a, std::span<const double> b,
                                          int parts);

/// sum_k qa_k qb_k d_k / (sum_k qa_k qb_k + eps).
double quality_weighted_distance(std::span<const double> d, std::span<const double> qa,
                                 std::span<const double> qb);

struct PartBranchConfig {
  int parts = 6;
  int in_channels = 256;
  int embed_dim = 1024;
  int num_classes = 1;
};

struct PartOutputs {
  Var z;  ///< [N,K,C]
  Var f;  ///< [N,K,d]
  Var q;  ///< [N,K], or all ones when quality is disabled
};

/// Per-stripe pooling, unshared 1x1 embeddings, unshared quality predictors
/// (1x1 projection to a scalar, batch norm, sigmoid) and part classifiers.
class PartBranch {
 public:
  PartBranch(ParameterStore& store, const PartBranchConfig& cfg, std::mt19937_64& rng);

  PartOutputs forward(const Var& feature_map, Mode mode, bool use_quality) const;
  /// z [N,K,C] -> q [N,K].
  Var quality(const Var& z, Mode mode) const;
  /// f [N,K,d] -> logits [N,K,classes].
  Var classify(const Var& f) const;

  /// f = W_k z + b_k for a single pooled vector.
  std::vector<double> embed(std::span<const double> z, int k) const;
  /// Eval-mode quality score of one pooled vector. Throws
  /// UncalibratedPredictorError before any training-mode pass.
  double predict_quality(std::span<const double> z, int k) const;

  const PartBranchConfig& config() const { return cfg_; }
  const PartLinear& embedding() const { return embed_; }
  const PartLinear& quality_projection() const { return quality_proj_; }
  const BatchNorm& quality_norm() const { return quality_bn_; }
  const PartLinear& classifier() const { return classifier_; }

 private:
  void check_part(int k) const;

  PartBranchConfig cfg_;
  PartLinear embed_;
  PartLinear quality_proj_;
  BatchNorm quality_bn_;
  PartLinear classifier_;
};

/// (1/N) sum_n sum_k CE(W_k f_k^n, y_n). The part sum is not normalised.
Var part_id_loss(const PartBranch& branch, const Var& f, std::span<const int> labels);

/// Batch-hard triplet loss over quality-weighted part distances.
Var part_triplet_loss(const Var& f, const Var& q, std::span<const int> labels, double margin);

/// Throws SamplingError unless the batch has >= 2 identities and every
/// identity appears >= 2 times.
void validate_pk_labels(std::span<const int> labels);

}  // namespace qpm
