#pragma once

#include <span>

#include "qpm/autograd.hpp"

/// Differentiable tensor operations. Layouts are NCHW for feature maps,
/// [N,K,C] for per-part vectors and [N,N,...] for pairwise quantities,
/// where entry [a,b] concerns the ordered image pair (a,b).
namespace qpm::ops {

// Elementwise and bookkeeping.
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Sum of one-element tensors; undefined entries are skipped.
Var sum_scalars(std::span<const Var> terms);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Rows `indices` of x [M,C] -> [indices.size(),C].
Var select_rows(const Var& x, std::span<const int> indices);

// Layers. Bias arguments may be undefined Vars.
/// x [N,Cin,H,W], weight [Cout,Cin,kh,kw] -> [N,Cout,Ho,Wo].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var max_pool2d(const Var& x, int kernel, int stride, int pad);
/// Normalises x [N,C] or [N,C,H,W] per channel. Training mode uses batch
/// statistics and updates the running ones; eval mode uses the running ones.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps);
/// x [N,in], weight [out,in], bias [out] -> [N,out].
Var linear(const Var& x, const Var& weight, const Var& bias);
/// Per-part affine maps with unshared parameters.
/// x [N,K,in], weight [K,out,in], bias [K,out] -> [N,K,out].
Var part_linear(const Var& x, const Var& weight, const Var& bias);

// Pooling.
/// Region average pooling over K equal horizontal stripes: [N,C,H,W] -> [N,K,C].
Var stripe_pool(const Var& x, int parts);
Var global_avg_pool(const Var& x);

// Losses and distances.
/// Sum over rows of softmax cross-entropy, divided by `divisor`.
/// logits [M,classes], labels.size() == M.
Var cross_entropy(const Var& logits, std::span<const int> labels, double divisor);
/// Quality-weighted part distance for every ordered pair in the batch.
/// f [N,K,d], q [N,K] -> [N,N].
Var quality_weighted_distances(const Var& f, const Var& q);
/// 1 - cosine similarity for every pair of rows: x [N,C] -> [N,N].
Var cosine_distance_matrix(const Var& x);
/// Batch-hard triplet loss over a distance matrix. Violating anchors are
/// averaged; returns 0 when no anchor violates the margin.
Var batch_hard_triplet(const Var& dist, std::span<const int> labels, double margin);

// Attention and pairwise aggregation.
/// h = sum_k (q_k / sum_i q_i) g_k. g [N,K,C], q [N,K] -> [N,C].
Var quality_weighted_pool(const Var& g, const Var& q);
/// M[n,y,x] = sigmoid(<G[n,:,y,x], h[n]>). G [N,C,H,W], h [N,C] -> [N,H,W].
Var pixel_attention(const Var& maps, const Var& h);
/// G + M (.) G with M broadcast over channels.
Var apply_attention(const Var& maps, const Var& attention);
/// w[a,b,k] = q[a,k] q[b,k] / sum_i q[a,i] q[b,i]. q [N,K] -> [N,N,K].
Var pair_weights(const Var& q);
/// h[a,b] = sum_k w[a,b,k] parts[a,k]. parts [N,K,C], w [N,N,K] -> [N,N,C].
/// h[a,b] is image a's feature for the pair (a,b); its partner is h[b,a].
Var pairwise_global(const Var& parts, const Var& weights);
/// D[a,b] = 1 - cos(h[a,b], h[b,a]). h [N,N,C] -> [N,N].
Var pair_cosine_distances(const Var& h);

}  // namespace qpm::ops
