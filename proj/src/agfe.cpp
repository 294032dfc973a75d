#include "qpm/agfe.hpp"

#include <algorithm>
#include <limits>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"
#include "qpm/part_branch.hpp"

namespace qpm {

std::vector<double> pair_weights(std::span<const double> qa, std::span<const double> qb) {
  if (qa.size() != qb.size() || qa.empty()) throw ConfigError("pair_weights: K mismatch");
  std::vector<double> w(qa.size());
  double total = 0.0;
  for (std::size_t k = 0; k < qa.size(); ++k) {
    w[k] = qa[k] * qb[k];
    total += w[k];
  }
  total = std::max(total, std::numeric_limits<double>::min());
  for (double& v : w) v /= total;
  return w;
}

PairGlobal pairwise_global(std::span<const double> parts_a, std::span<const double> parts_b,
                           std::span<const double> weights) {
  const std::size_t k = weights.size();
  if (k == 0 || parts_a.size() != parts_b.size() || parts_a.size() % k != 0) {
    throw ConfigError("pairwise_global: part vectors do not match K");
  }
  const std::size_t c = parts_a.size() / k;
  PairGlobal out{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.first[j] += weights[i] * parts_a[i * c + j];
      out.second[j] += weights[i] * parts_b[i * c + j];
    }
  }
  return out;
}

double adaptive_global_distance(std::span<const double> parts_a, std::span<const double> qa,
                                std::span<const double> parts_b, std::span<const double> qb) {
  const PairGlobal pg = pairwise_global(parts_a, parts_b, pair_weights(qa, qb));
  return cosine_distance(pg.first, pg.second);
}

Var pairwise_global_features(const Var& parts, const Var& q) {
  return ops::pairwise_global(parts, ops::pair_weights(q));
}

Var sg_id_loss(const Linear& classifier, const Var& pair_features, std::span<const int> labels,
               bool include_diagonal) {
  const int n = pair_features.dim(0), c = pair_features.dim(2);
  if (static_cast<int>(labels.size()) != n) throw ConfigError("sg_id_loss: label count");
  Var pairs = ops::reshape(pair_features, {n * n, c});
  // Row a*N+b holds h^a_b, a feature of image a. Each ordered pair appears
  // once as h^p_g and once as h^g_p in the double sum, hence the factor 2.
  std::vector<int> rows_labels;
  if (include_diagonal) {
    rows_labels.resize(static_cast<std::size_t>(n) * n);
    for (int a = 0; a < n; ++a) {
      std::fill_n(rows_labels.begin() + static_cast<std::ptrdiff_t>(a) * n, n, labels[a]);
    }
    const double norm = static_cast<double>(n) * n / 2.0;
    return ops::cross_entropy(classifier(pairs), rows_labels, norm);
  }
  if (n < 2) throw SamplingError("sg_id_loss without diagonal needs N >= 2");
  std::vector<int> keep;
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      keep.push_back(a * n + b);
      rows_labels.push_back(labels[a]);
    }
  }
  const double norm = static_cast<double>(n) * (n - 1) / 2.0;
  return ops::cross_entropy(classifier(ops::select_rows(pairs, keep)), rows_labels, norm);
}

Var global_triplet_loss(const Var& pairs, std::span<const int> labels, double margin) {
  validate_pk_labels(labels);
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be positive");
  return ops::batch_hard_triplet(ops::pair_cosine_distances(pairs), labels, margin);
}

}  // namespace qpm
