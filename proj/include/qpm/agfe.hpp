#pragma once

#include <span>
#include <vector>

#include "qpm/nn.hpp"

namespace qpm {

/// w_k = qa_k qb_k / sum_i qa_i qb_i. Symmetric in (a, b); sums to 1.
std::vector<double> pair_weights(std::span<const double> qa, std::span<const double> qb);

/// Global features of an image pair built from the same pair weights.
struct PairGlobal {
  std::vector<double> first;   ///< sum_k w_k g~_k of image a
  std::vector<double> second;  ///< sum_k w_k g~_k of image b
};

/// parts_a / parts_b are flattened [K,C'] pooled vectors of G~.
PairGlobal pairwise_global(std::span<const double> parts_a, std::span<const double> parts_b,
                           std::span<const double> weights);

/// Cosine distance between the two pairwise global features of (a, b).
double adaptive_global_distance(std::span<const double> parts_a, std::span<const double> qa,
                                std::span<const double> parts_b, std::span<const double> qb);

/// Pairwise global features of every ordered pair in a batch.
/// parts [N,K,C'], q [N,K] -> [N,N,C'] where [a,b] is image a's feature for (a,b).
Var pairwise_global_features(const Var& parts, const Var& q);

/// Shared-classifier identity loss over every ordered pair of the batch:
/// (1/N^2) sum_g sum_p [CE(W h^p_g) + CE(W h^g_p)].
/// With `include_diagonal == false` the p == g pairs are dropped and the
/// normaliser becomes N(N-1). `pairs` comes from pairwise_global_features.
Var sg_id_loss(const Linear& classifier, const Var& pairs, std::span<const int> labels,
               bool include_diagonal = true);

/// Batch-hard triplet loss on the pairwise global distances.
Var global_triplet_loss(const Var& pairs, std::span<const int> labels, double margin);

}  // namespace qpm
