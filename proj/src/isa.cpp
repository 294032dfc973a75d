#include "qpm/isa.hpp"

#include <cmath>
#include <tuple>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

namespace {
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace

void IsaConfig::validate() const {
  if (parts < 1 || in_channels < 1 || channels < 1 || num_classes < 1) {
    throw ConfigError("attention dimensions must be positive");
  }
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("global channels C'=" + std::to_string(channels) +
                      " not divisible by reduction ratio " + std::to_string(reduction));
  }
}

IdentityAwareAttention::IdentityAwareAttention(ParameterStore& store, const IsaConfig& cfg,
                                               std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int reduced = cfg_.channels / cfg_.reduction;
  proj_ = Conv2d(store, "isa.proj", cfg_.in_channels, cfg_.channels, 1, 1, 0, true, rng);
  reduce_ = Linear(store, "isa.reduce", cfg_.channels, reduced,
                   std::sqrt(2.0 / cfg_.channels), cfg_.excite_bias, rng);
  // Small restore weights keep the initial attention logits near zero.
  restore_ = Linear(store, "isa.restore", reduced, cfg_.channels, 0.1 / std::sqrt(reduced),
                    cfg_.excite_bias, rng);
  classifier_ = Linear(store, "isa.classifier", reduced, cfg_.num_classes, 1e-3, true, rng);
}

Var IdentityAwareAttention::project(const Var& feature_map) const { return proj_(feature_map); }

std::pair<Var, Var> IdentityAwareAttention::excite(const Var& h) const {
  Var h_hat = ops::relu(reduce_(h));
  Var h_tilde = restore_(h_hat);
  return {h_hat, h_tilde};
}

Var IdentityAwareAttention::classify(const Var& h_hat) const { return classifier_(h_hat); }

IsaOutputs IdentityAwareAttention::forward(const Var& feature_map, const Var& quality,
                                           bool enabled) const {
  IsaOutputs out;
  out.maps = project(feature_map);
  if (!enabled) {
    out.attended = out.maps;
    return out;
  }
  out.parts = ops::stripe_pool(out.maps, cfg_.parts);
  out.h = ops::quality_weighted_pool(out.parts, quality);
  std::tie(out.h_hat, out.h_tilde) = excite(out.h);
  out.attention = ops::pixel_attention(out.maps, out.h_tilde);
  out.attended = ops::apply_attention(out.maps, out.attention);
  return out;
}

ExciteResult IdentityAwareAttention::excite(std::span<const double> h) const {
  if (static_cast<int>(h.size()) != cfg_.channels) throw ConfigError("excite: wrong h size");
  NoGradGuard guard;
  Tensor t({1, cfg_.channels}, std::vector<double>(h.begin(), h.end()));
  auto [h_hat, h_tilde] = excite(Var(std::move(t)));
  return {std::vector<double>(h_hat.value().values().begin(), h_hat.value().values().end()),
          std::vector<double>(h_tilde.value().values().begin(), h_tilde.value().values().end())};
}

std::vector<double> coarse_global(std::span<const double> parts, std::span<const double> q) {
  const std::size_t k = q.size();
  if (k == 0 || parts.size() % k != 0) throw ConfigError("coarse_global: K mismatch");
  const std::size_t c = parts.size() / k;
  double total = 0.0;
  for (double v : q) total += v;
  std::vector<double> h(c, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const double w = q[i] / total;
    for (std::size_t j = 0; j < c; ++j) h[j] += w * parts[i * c + j];
  }
  return h;
}

Tensor attention_map(const Tensor& maps, std::span<const double> h_tilde) {
  if (maps.rank() != 3 || maps.dim(0) != static_cast<int>(h_tilde.size())) {
    throw ConfigError("attention_map: expected [C',H,W] maps matching h_tilde");
  }
  const int c = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  Tensor m({h, w});
  Eigen::RowVectorXd logits =
      ConstVecMap(h_tilde.data(), c).transpose() * maps.matrix(c, h * w);
  for (int p = 0; p < h * w; ++p) m[p] = sigmoid(logits[p]);
  return m;
}

Tensor apply_attention(const Tensor& maps, const Tensor& attention) {
  if (maps.rank() != 3 || attention.shape() != Shape{maps.dim(1), maps.dim(2)}) {
    throw ConfigError("apply_attention: map " + shape_str(attention.shape()) +
                      " does not match features " + shape_str(maps.shape()));
  }
  const std::size_t hw = attention.size();
  Tensor out(maps.shape());
  for (int c = 0; c < maps.dim(0); ++c) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double g = maps[c * hw + p];
      out[c * hw + p] = attention[p] * g + g;
    }
  }
  return out;
}

Var global_id_loss(const IdentityAwareAttention& isa, const Var& h_hat,
                   std::span<const int> labels) {
  return ops::cross_entropy(isa.classify(h_hat), labels, static_cast<double>(h_hat.dim(0)));
}

}  // namespace qpm
