#include "qpm/part_branch.hpp"

#include <cmath>
#include <map>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

std::vector<double> rap(const Tensor& stripe) {
  if (stripe.rank() != 3 || stripe.dim(1) * stripe.dim(2) == 0) {
    throw ConfigError("rap expects a non-empty [C,h,w] stripe, got " + shape_str(stripe.shape()));
  }
  const int c = stripe.dim(0);
  const std::size_t area = static_cast<std::size_t>(stripe.dim(1)) * stripe.dim(2);
  std::vector<double> z(c);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const double* p = stripe.data() + ch * area;
    for (std::size_t i = 0; i < area; ++i) s += p[i];
    z[ch] = s / static_cast<double>(area);
  }
  return z;
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("cosine_distance: dimension mismatch");
  // Plain loop: the summation order must not depend on buffer alignment.
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(aa) * std::sqrt(bb) + kDistanceEps);
}

std::vector<double> part_cosine_distances(std::span<const PartDescriptor> a,
                                          std::span<const PartDescriptor> b) {
  if (a.size() != b.size()) throw ConfigError("part_cosine_distances: K differs");
  std::vector<double> d(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) d[k] = cosine_distance(a[k].f, b[k].f);
  return d;
}

std::vector<double> part_cosine_distances(std::span<const double> a, std::span<const double> b,
                                          int parts) {
  if (parts < 1 || a.size() != b.size() || a.size() % parts != 0) {
    throw ConfigError("part_cosine_distances: embeddings do not split into K parts");
  }
  const std::size_t d = a.size() / parts;
  std::vector<double> out(parts);
  for (int k = 0; k < parts; ++k) {
    out[k] = cosine_distance(a.subspan(k * d, d), b.subspan(k * d, d));
  }
  return out;
}

double quality_weighted_distance(std::span<const double> d, std::span<const double> qa,
                                 std::span<const double> qb) {
  if (d.size() != qa.size() || d.size() != qb.size()) {
    throw ConfigError("quality_weighted_distance: K differs between inputs");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    const double w = qa[k] * qb[k];
    num += w * d[k];
    den += w;
  }
  return num / (den + kDistanceEps);
}

PartBranch::PartBranch(ParameterStore& store, const PartBranchConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.parts < 1 || cfg.in_channels < 1 || cfg.embed_dim < 1 || cfg.num_classes < 1) {
    throw ConfigError("part branch dimensions must be positive");
  }
  const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.in_channels));
  embed_ = PartLinear(store, "part.embed", cfg.parts, cfg.in_channels, cfg.embed_dim, in_std, rng);
  quality_proj_ = PartLinear(store, "part.quality.proj", cfg.parts, cfg.in_channels, 1, in_std, rng);
  quality_bn_ = BatchNorm(store, "part.quality.bn", cfg.parts);
  classifier_ = PartLinear(store, "part.classifier", cfg.parts, cfg.embed_dim, cfg.num_classes,
                           1e-3, rng);
}

PartOutputs PartBranch::forward(const Var& feature_map, Mode mode, bool use_quality) const {
  PartOutputs out;
  out.z = ops::stripe_pool(feature_map, cfg_.parts);
  out.f = embed_(out.z);
  const int n = feature_map.dim(0);
  out.q = use_quality ? quality(out.z, mode) : Var(Tensor({n, cfg_.parts}, 1.0));
  return out;
}

Var PartBranch::quality(const Var& z, Mode mode) const {
  if (mode == Mode::eval && !quality_bn_.calibrated()) {
    throw UncalibratedPredictorError(
        "quality predictor has no running statistics; run a training pass first");
  }
  const int n = z.dim(0);
  Var pre = ops::reshape(quality_proj_(z), {n, cfg_.parts});
  return ops::sigmoid(quality_bn_(pre, mode));
}

Var PartBranch::classify(const Var& f) const { return classifier_(f); }

void PartBranch::check_part(int k) const {
  if (k < 0 || k >= cfg_.parts) {
    throw ConfigError("part index " + std::to_string(k) + " outside [0," +
                      std::to_string(cfg_.parts) + ")");
  }
}

std::vector<double> PartBranch::embed(std::span<const double> z, int k) const {
  check_part(k);
  if (static_cast<int>(z.size()) != cfg_.in_channels) throw ConfigError("embed: wrong z size");
  const int d = cfg_.embed_dim, c = cfg_.in_channels;
  const ConstMatMap w = embed_.weight.value().matrix(d, c, static_cast<std::size_t>(k) * d * c);
  Eigen::VectorXd f = w * ConstVecMap(z.data(), c) +
                      ConstVecMap(embed_.bias.value().data() + static_cast<std::size_t>(k) * d, d);
  return {f.data(), f.data() + d};
}

double PartBranch::predict_quality(std::span<const double> z, int k) const {
  check_part(k);
  if (static_cast<int>(z.size()) != cfg_.in_channels) throw ConfigError("quality: wrong z size");
  Tensor one({1, cfg_.parts, cfg_.in_channels}, 0.0);
  std::copy(z.begin(), z.end(), one.data() + static_cast<std::size_t>(k) * cfg_.in_channels);
  NoGradGuard guard;
  return quality(Var(std::move(one)), Mode::eval).value()[k];
}

Var part_id_loss(const PartBranch& branch, const Var& f, std::span<const int> labels) {
  const int n = f.dim(0), parts = f.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ConfigError("part_id_loss: label count");
  Var logits = branch.classify(f);
  const int classes = logits.dim(2);
  std::vector<int> rows(static_cast<std::size_t>(n) * parts);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < parts; ++k) rows[static_cast<std::size_t>(i) * parts + k] = labels[i];
  }
  return ops::cross_entropy(ops::reshape(logits, {n * parts, classes}), rows, n);
}

Var part_triplet_loss(const Var& f, const Var& q, std::span<const int> labels, double margin) {
  validate_pk_labels(labels);
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be positive");
  return ops::batch_hard_triplet(ops::quality_weighted_distances(f, q), labels, margin);
}

void validate_pk_labels(std::span<const int> labels) {
  std::map<int, int> counts;
  for (int y : labels) ++counts[y];
  if (counts.size() < 2) throw SamplingError("triplet batch needs at least 2 identities (P >= 2)");
  for (const auto& [id, count] : counts) {
    if (count < 2) {
      throw SamplingError("identity " + std::to_string(id) +
                          " has a single image in the batch (A >= 2 required)");
    }
  }
}

}  // namespace qpm
