#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qpm/backbone.hpp"
#include "qpm/error.hpp"
#include "qpm/ops.hpp"
#include "qpm/part_branch.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace qpm {
namespace {

using testing::random_tensor;

double ce_oracle(const double* logits, int classes, int label) {
  double m = logits[0];
  for (int c = 1; c < classes; ++c) m = std::max(m, logits[c]);
  double s = 0.0;
  for (int c = 0; c < classes; ++c) s += std::exp(logits[c] - m);
  return m + std::log(s) - logits[label];
}

// Hardest positive / negative per anchor by enumeration, hinge averaged over
// violating anchors.
double triplet_oracle(const std::vector<std::vector<double>>& d, const std::vector<int>& y,
                      double margin) {
  const int n = static_cast<int>(y.size());
  double total = 0.0;
  int violators = 0;
  for (int a = 0; a < n; ++a) {
    double hardest_pos = -1e300, hardest_neg = 1e300;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      if (y[b] == y[a]) hardest_pos = std::max(hardest_pos, d[a][b]);
      else hardest_neg = std::min(hardest_neg, d[a][b]);
    }
    const double h = margin + hardest_pos - hardest_neg;
    if (h > 0) {
      total += h;
      ++violators;
    }
  }
  return violators ? total / violators : 0.0;
}

struct Branch {
  ParameterStore store;
  std::mt19937_64 rng{4};
  PartBranch branch;
  Branch(int parts, int c, int d, int classes)
      : branch(store, PartBranchConfig{parts, c, d, classes}, rng) {}
};

// Backbone

TEST(Backbone, PaperVariantStride16) {
  BackboneConfig cfg;
  cfg.variant = BackboneVariant::paper;
  cfg.spatial_stride = 16;
  cfg.base_width = 2;
  cfg.output_channels = 64;
  cfg.stage_blocks = {1, 1, 1, 1};
  ParameterStore store;
  std::mt19937_64 rng(1);
  Backbone bb(store, cfg, rng);
  Var x(Tensor({1, 3, 384, 128}, 0.1));
  const Var f = bb.forward(x, Mode::train);
  EXPECT_EQ(f.value().shape(), (Shape{1, 64, 24, 8}));
}

TEST(Backbone, ToyVariantShape) {
  BackboneConfig cfg;
  cfg.input_height = 64;
  cfg.input_width = 32;
  cfg.output_channels = 16;
  cfg.parts = 4;
  ParameterStore store;
  std::mt19937_64 rng(1);
  Backbone bb(store, cfg, rng);
  std::mt19937_64 data(2);
  Var x(random_tensor({2, 3, 64, 32}, data));
  EXPECT_EQ(bb.forward(x, Mode::train).value().shape(), (Shape{2, 16, 8, 4}));
}

TEST(Backbone, DeterministicForward) {
  BackboneConfig cfg;
  cfg.input_height = 32;
  cfg.input_width = 16;
  cfg.output_channels = 8;
  cfg.parts = 2;
  ParameterStore store;
  std::mt19937_64 rng(1);
  Backbone bb(store, cfg, rng);
  std::mt19937_64 data(3);
  Var x(random_tensor({1, 3, 32, 16}, data));
  bb.forward(x, Mode::train);  // calibrate running stats
  const Tensor a = bb.forward(x, Mode::eval).value();
  const Tensor b = bb.forward(x, Mode::eval).value();
  EXPECT_TRUE(a == b);
}

TEST(Backbone, RejectsIndivisibleParts) {
  BackboneConfig cfg;
  cfg.input_height = 64;
  cfg.input_width = 32;
  cfg.parts = 6;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// Stripes and region average pooling

Tensor row_ramp(int c, int h, int w) {
  Tensor t({1, c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) t[(ch * h + y) * w + x] = 100.0 * ch + y;
    }
  }
  return t;
}

TEST(Stripes, SixStripesOfHeightFour) {
  const Tensor p = ops::stripe_pool(Var(row_ramp(2, 24, 8)), 6).value();
  ASSERT_EQ(p.shape(), (Shape{1, 6, 2}));
  for (int k = 0; k < 6; ++k) {
    // mean of rows 4k..4k+3
    EXPECT_NEAR(p[k * 2 + 0], 4.0 * k + 1.5, 1e-12);
    EXPECT_NEAR(p[k * 2 + 1], 100.0 + 4.0 * k + 1.5, 1e-12);
  }
}

TEST(Stripes, SingleStripeIsGlobalMean) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 8, 4}, rng);
  const Tensor a = ops::stripe_pool(Var(x), 1).value();
  const Tensor b = ops::global_avg_pool(Var(x)).value();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Stripes, FourStripesOfEightRows) {
  const Tensor p = ops::stripe_pool(Var(row_ramp(1, 8, 4)), 4).value();
  const double expected[] = {0.5, 2.5, 4.5, 6.5};
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(p[k], expected[k]);
}

TEST(Rap, ConstantStripe) {
  const auto z = rap(Tensor({5, 2, 3}, 3.0));
  for (double v : z) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Rap, SinglePixel) {
  const auto z = rap(Tensor({3, 1, 1}, std::vector<double>{1.5, -2.0, 7.0}));
  EXPECT_EQ(z, (std::vector<double>{1.5, -2.0, 7.0}));
}

TEST(Rap, RandomStripeMatchesDirectSum) {
  std::mt19937_64 rng(6);
  const Tensor s = random_tensor({6, 4, 8}, rng);
  const auto z = rap(s);
  const auto ref = oracle::stripe_mean(s.storage(), 6, 4, 8, 0, 4);
  for (int c = 0; c < 6; ++c) EXPECT_NEAR(z[c], ref[c], 1e-6);
}

// Embedding

TEST(Embedding, IdentityWeights) {
  Branch b(2, 4, 4, 3);
  Var w = b.branch.embedding().weight;
  Var bias = b.branch.embedding().bias;
  w.mutable_value().set_zero();
  bias.mutable_value().set_zero();
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < 4; ++i) w.mutable_value()[(k * 4 + i) * 4 + i] = 1.0;
  }
  const std::vector<double> z{0.3, -1.0, 2.0, 5.0};
  EXPECT_EQ(b.branch.embed(z, 1), z);
}

TEST(Embedding, ZeroInputGivesBias) {
  Branch b(2, 4, 3, 3);
  Var bias = b.branch.embedding().bias;
  for (std::size_t i = 0; i < bias.value().size(); ++i) bias.mutable_value()[i] = 0.5 * i;
  const auto f = b.branch.embed(std::vector<double>(4, 0.0), 1);
  EXPECT_EQ(f, (std::vector<double>{1.5, 2.0, 2.5}));
}

TEST(Embedding, PartsAreNotShared) {
  Branch b(2, 4, 3, 3);
  const std::vector<double> z{0.3, -1.0, 2.0, 5.0};
  EXPECT_NE(b.branch.embed(z, 0), b.branch.embed(z, 1));
  EXPECT_THROW(b.branch.embed(z, 2), ConfigError);
}

// Quality predictor

void calibrate(Branch& b, double beta) {
  Var w = b.branch.quality_projection().weight;
  Var bias = b.branch.quality_projection().bias;
  w.mutable_value().set_zero();
  bias.mutable_value().set_zero();
  const BatchNorm& bn = b.branch.quality_norm();
  bn.running_mean->set_zero();
  bn.running_var->fill(1.0);
  (*bn.tracked)[0] = 1.0;
  Var beta_v = bn.beta;
  beta_v.mutable_value().fill(beta);
}

TEST(Quality, ZeroActivationGivesHalf) {
  Branch b(3, 4, 4, 2);
  calibrate(b, 0.0);
  EXPECT_DOUBLE_EQ(b.branch.predict_quality(std::vector<double>{1, 2, 3, 4}, 1), 0.5);
}

TEST(Quality, SaturatesBelowOne) {
  Branch b(3, 4, 4, 2);
  calibrate(b, 20.0);
  const double q = b.branch.predict_quality(std::vector<double>{1, 2, 3, 4}, 2);
  EXPECT_GT(q, 0.999999);
  EXPECT_LT(q, 1.0);
}

TEST(Quality, UncalibratedEvalThrows) {
  Branch b(2, 4, 4, 2);
  EXPECT_THROW(b.branch.predict_quality(std::vector<double>{1, 2, 3, 4}, 0),
               UncalibratedPredictorError);
  EXPECT_THROW(b.branch.quality(Var(Tensor({1, 2, 4}, 1.0)), Mode::eval), UncalibratedPredictorError);
  b.branch.quality(Var(Tensor({3, 2, 4}, 1.0)), Mode::train);
  EXPECT_NO_THROW(b.branch.quality(Var(Tensor({1, 2, 4}, 1.0)), Mode::eval));
}

TEST(Quality, BatchNormMoments) {
  std::mt19937_64 rng(8);
  const int n = 64, k = 6;
  Tensor x = random_tensor({n, k}, rng, -3.0, 5.0);
  Tensor rm({k}, 0.0), rv({k}, 1.0);
  Var gamma(Tensor({k}, 1.0)), beta(Tensor({k}, 0.0));
  const Tensor y = ops::batch_norm(Var(x), gamma, beta, rm, rv, true, 0.1, 1e-5).value();
  for (int c = 0; c < k; ++c) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < n; ++i) mean += y[i * k + c];
    mean /= n;
    for (int i = 0; i < n; ++i) var += (y[i * k + c] - mean) * (y[i * k + c] - mean);
    var /= n;
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Quality, OutputInOpenUnitInterval) {
  Branch b(4, 8, 4, 2);
  std::mt19937_64 rng(9);
  const Tensor q = b.branch.quality(Var(random_tensor({16, 4, 8}, rng, -10, 10)), Mode::train).value();
  for (double v : q.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

// Distances

TEST(PartDistance, IdenticalDescriptorsAreZero) {
  std::mt19937_64 rng(10);
  const auto f = oracle::uniform(6 * 5, rng);
  for (double d : part_cosine_distances(f, f, 6)) EXPECT_LE(std::abs(d), 1e-6);
}

TEST(PartDistance, AntipodalIsTwo) {
  std::mt19937_64 rng(11);
  auto f = oracle::uniform(4 * 3, rng);
  auto g = f;
  for (double& v : g) v = -v;
  for (double d : part_cosine_distances(f, g, 4)) EXPECT_NEAR(d, 2.0, 1e-6);
}

TEST(PartDistance, RandomPairMatchesOracle) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const auto a = oracle::uniform(7, rng), b = oracle::uniform(7, rng);
    EXPECT_NEAR(cosine_distance(a, b), oracle::cosine_distance(a, b), 1e-6);
  }
}

TEST(QualityWeightedDistance, UniformWeightsGiveMean) {
  const std::vector<double> d{0.1, 0.5, 0.9, 1.3}, ones(4, 1.0);
  EXPECT_NEAR(quality_weighted_distance(d, ones, ones), 0.7, 1e-8);
}

TEST(QualityWeightedDistance, OneHotSelectsThatPart) {
  const std::vector<double> d{0.1, 0.5, 0.9, 1.3}, q{0, 0, 1, 0};
  EXPECT_NEAR(quality_weighted_distance(d, q, q), 0.9, 1e-7);
}

TEST(QualityWeightedDistance, RandomSixPartsMatchOracle) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 20; ++t) {
    const auto fa = oracle::uniform(6 * 8, rng), fb = oracle::uniform(6 * 8, rng);
    const auto qa = oracle::uniform(6, rng, 0.01, 1), qb = oracle::uniform(6, rng, 0.01, 1);
    EXPECT_NEAR(quality_weighted_distance(part_cosine_distances(fa, fb, 6), qa, qb),
                oracle::part_distance(fa, qa, fb, qb), 1e-7);
  }
}

// Part losses

TEST(PartIdLoss, UniformLogitsSumOverParts) {
  Branch b(6, 4, 4, 10);
  Var w = b.branch.classifier().weight;
  w.mutable_value().set_zero();
  std::mt19937_64 rng(14);
  const std::vector<int> y{0, 3, 7};
  const double loss = part_id_loss(b.branch, Var(random_tensor({3, 6, 4}, rng)), y).value()[0];
  EXPECT_NEAR(loss, 6.0 * std::log(10.0), 1e-9);
}

TEST(PartIdLoss, SeparatedLogitsVanish) {
  Branch b(2, 3, 3, 3);
  Var w = b.branch.classifier().weight;
  w.mutable_value().set_zero();
  for (int k = 0; k < 2; ++k) {
    for (int c = 0; c < 3; ++c) w.mutable_value()[(k * 3 + c) * 3 + c] = 1e3;
  }
  Tensor f({3, 2, 3}, 0.0);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 2; ++k) f[(i * 2 + k) * 3 + i] = 1.0;
  }
  const std::vector<int> y{0, 1, 2};
  EXPECT_LT(part_id_loss(b.branch, Var(f), y).value()[0], 1e-12);
}

TEST(PartIdLoss, RandomBatchMatchesScalarOracle) {
  Branch b(3, 5, 4, 6);
  std::mt19937_64 rng(15);
  Var bias = b.branch.classifier().bias;
  bias.mutable_value() = random_tensor(bias.value().shape(), rng);
  const Tensor f = random_tensor({4, 3, 4}, rng, -2, 2);
  const std::vector<int> y{1, 5, 0, 1};
  const double loss = part_id_loss(b.branch, Var(f), y).value()[0];
  const Tensor& w = b.branch.classifier().weight.value();
  double ref = 0.0;
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 3; ++k) {
      double logits[6];
      for (int c = 0; c < 6; ++c) {
        logits[c] = bias.value()[k * 6 + c];
        for (int j = 0; j < 4; ++j) logits[c] += w[(k * 6 + c) * 4 + j] * f[(i * 3 + k) * 4 + j];
      }
      ref += ce_oracle(logits, 6, y[i]);
    }
  }
  EXPECT_NEAR(loss, ref / 4.0, 1e-6);
}

TEST(PartTriplet, IdenticalEmbeddingsGiveMargin) {
  const Tensor f({4, 2, 3}, 0.7);
  const Tensor q({4, 2}, 0.5);
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_NEAR(part_triplet_loss(Var(f), Var(q), y, 0.3).value()[0], 0.3, 1e-9);
}

TEST(PartTriplet, SatisfiedMarginGivesZero) {
  // Identity 0 points along +x, identity 1 along +y: D_ap = 0, D_an = 1.
  Tensor f({4, 1, 2}, std::vector<double>{1, 0, 2, 0, 0, 1, 0, 3});
  const Tensor q({4, 1}, 0.9);
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(part_triplet_loss(Var(f), Var(q), y, 0.3).value()[0], 0.0);
}

TEST(PartTriplet, MatchesExhaustiveMining) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < 20; ++t) {
    const Tensor f = random_tensor({4, 3, 5}, rng);
    const Tensor q = random_tensor({4, 3}, rng, 0.05, 1.0);
    const std::vector<int> y{0, 0, 1, 1};
    std::vector<std::vector<double>> d(4, std::vector<double>(4));
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) {
        d[a][b] = oracle::part_distance(oracle::Vec(f.data() + a * 15, f.data() + a * 15 + 15),
                                        oracle::Vec(q.data() + a * 3, q.data() + a * 3 + 3),
                                        oracle::Vec(f.data() + b * 15, f.data() + b * 15 + 15),
                                        oracle::Vec(q.data() + b * 3, q.data() + b * 3 + 3));
      }
    }
    EXPECT_NEAR(part_triplet_loss(Var(f), Var(q), y, 0.3).value()[0], triplet_oracle(d, y, 0.3), 1e-9);
  }
}

TEST(PartTriplet, RejectsBatchesWithoutPositives) {
  const Tensor f({3, 1, 2}, 1.0), q({3, 1}, 0.5);
  EXPECT_THROW(part_triplet_loss(Var(f), Var(q), std::vector<int>{0, 0, 1}, 0.3), SamplingError);
  EXPECT_THROW(part_triplet_loss(Var(f), Var(q), std::vector<int>{0, 0, 0}, 0.3), SamplingError);
}

}  // namespace
}  // namespace qpm
