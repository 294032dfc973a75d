#pragma once

#include <random>
#include <span>
#include <vector>

#include "qpm/nn.hpp"

namespace qpm {

struct IsaConfig {
  int parts = 6;
  int in_channels = 256;    ///< C of the backbone map F
  int channels = 1024;      ///< C' of the global maps G
  int reduction = 4;
  int num_classes = 1;
  bool excite_bias = true;

  void validate() const;
};

struct IsaOutputs {
  Var maps;       ///< G [N,C',H,W]
  Var parts;      ///< RAP of G per stripe [N,K,C']
  Var h;          ///< coarse identity-aware vector [N,C']
  Var h_hat;      ///< reduced vector [N,C'/r]
  Var h_tilde;    ///< restored vector [N,C']
  Var attention;  ///< M [N,H,W]
  Var attended;   ///< G~ = G + M (.) G, or G itself when attention is disabled
};

struct ExciteResult {
  std::vector<double> h_hat;
  std::vector<double> h_tilde;
};

/// Identity-aware spatial attention over a 1x1 projection of the backbone map.
class IdentityAwareAttention {
 public:
  IdentityAwareAttention(ParameterStore& store, const IsaConfig& cfg, std::mt19937_64& rng);

  /// `enabled == false` stops after the projection (G~ = G).
  IsaOutputs forward(const Var& feature_map, const Var& quality, bool enabled) const;

  Var project(const Var& feature_map) const;
  /// h [N,C'] -> {h_hat, h_tilde}.
  std::pair<Var, Var> excite(const Var& h) const;
  /// Identity logits from h_hat.
  Var classify(const Var& h_hat) const;

  ExciteResult excite(std::span<const double> h) const;

  const IsaConfig& config() const { return cfg_; }
  const Conv2d& projection() const { return proj_; }
  const Linear& reduce_layer() const { return reduce_; }
  const Linear& restore_layer() const { return restore_; }
  const Linear& classifier() const { return classifier_; }

 private:
  IsaConfig cfg_;
  Conv2d proj_;
  Linear reduce_;
  Linear restore_;
  Linear classifier_;
};

/// h = sum_k (q_k / sum_i q_i) g_k over flattened [K,C'] part vectors.
std::vector<double> coarse_global(std::span<const double> parts, std::span<const double> q);

/// M[y,x] = sigmoid(<G[:,y,x], h_tilde>) for G [C',H,W] -> [H,W].
Tensor attention_map(const Tensor& maps, std::span<const double> h_tilde);

/// G + M (.) G with M broadcast over channels.
Tensor apply_attention(const Tensor& maps, const Tensor& attention);

/// (1/N) sum_n CE(W^g h_hat^n, y_n).
Var global_id_loss(const IdentityAwareAttention& isa, const Var& h_hat,
                   std::span<const int> labels);

}  // namespace qpm
