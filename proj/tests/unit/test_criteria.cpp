#include <gtest/gtest.h>

#include <algorithm>
#include <memory>
#include <random>

#include "qpm/data.hpp"
#include "qpm/retrieval.hpp"
#include "support/criteria.hpp"
#include "support/gradcheck.hpp"

namespace qpm {
namespace {

TEST(Criteria, OracleEquivalence) {
  const auto v = testing::oracle_equivalence();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Criteria, LossGradients) {
  const auto v = testing::gradient_suite();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Criteria, StructuralInvariants) {
  const auto v = testing::structural_invariants();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Criteria, RetrievalConsistency) {
  const auto v = testing::retrieval_consistency();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Criteria, MetricCorrectness) {
  const auto v = testing::metric_correctness();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Criteria, ConfigFidelity) {
  const auto v = testing::config_fidelity();
  EXPECT_TRUE(v.pass) << v.detail;
}

std::vector<ReidSample> tiny_samples(int count, int h, int w) {
  SynthConfig sc;
  sc.num_identities = 2;
  sc.test_identities = 1;
  sc.images_per_identity = std::max(count, 3);
  sc.height = h;
  sc.width = w;
  sc.seed = 5;
  auto train = synth_generate(sc).train;
  train.resize(count);
  return train;
}

ImageSpec tiny_spec() {
  const ModelConfig mc = testing::tiny_model_config();
  ImageSpec s;
  s.height = mc.backbone.input_height;
  s.width = mc.backbone.input_width;
  return s;
}

// One training-mode pass so the quality predictor has batch statistics.
std::unique_ptr<QpmModel> calibrated_tiny_model() {
  auto model = std::make_unique<QpmModel>(testing::tiny_model_config());
  std::mt19937_64 rng(3);
  model->forward(Var(testing::random_tensor({4, 3, 16, 8}, rng)), Mode::train);
  return model;
}

TEST(IndexImages, OneImageOneRecord) {
  const auto owned = calibrated_tiny_model();
  const QpmModel& model = *owned;
  const auto samples = tiny_samples(1, 16, 8);
  const FeatureIndex idx = index_images(model, samples, tiny_spec());
  ASSERT_EQ(idx.records.size(), 1u);
  const int k = model.config().parts();
  EXPECT_EQ(idx.parts, k);
  EXPECT_EQ(idx.records[0].f.size(), static_cast<std::size_t>(k * model.config().embed_dim));
  EXPECT_EQ(idx.records[0].q.size(), static_cast<std::size_t>(k));
  EXPECT_EQ(idx.records[0].g.size(), static_cast<std::size_t>(k * model.config().global_channels));
  EXPECT_EQ(idx.records[0].id, samples[0].id);
  EXPECT_EQ(idx.records[0].cam, samples[0].cam);
}

TEST(IndexImages, DuplicateImagesGiveIdenticalRecords) {
  const auto owned = calibrated_tiny_model();
  const QpmModel& model = *owned;
  auto samples = tiny_samples(1, 16, 8);
  samples.push_back(samples[0]);
  const FeatureIndex idx = index_images(model, samples, tiny_spec());
  EXPECT_EQ(idx.records[0].f, idx.records[1].f);
  EXPECT_EQ(idx.records[0].q, idx.records[1].q);
  EXPECT_EQ(idx.records[0].g, idx.records[1].g);
}

TEST(IndexImages, MatchesDirectForward) {
  const auto owned = calibrated_tiny_model();
  const QpmModel& model = *owned;
  const auto samples = tiny_samples(3, 16, 8);
  const ImageSpec spec = tiny_spec();
  const FeatureIndex idx = index_images(model, samples, spec);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    NoGradGuard guard;
    const Tensor t = to_tensor(sample_pixels(samples[i]), spec).reshaped({1, 3, spec.height, spec.width});
    const ModelOutputs out = model.forward(Var(t), Mode::eval);
    const auto f = out.part.f.value().values();
    const auto q = out.part.q.value().values();
    ASSERT_EQ(f.size(), idx.records[i].f.size());
    for (std::size_t j = 0; j < f.size(); ++j) EXPECT_NEAR(f[j], idx.records[i].f[j], 1e-6);
    for (std::size_t j = 0; j < q.size(); ++j) EXPECT_NEAR(q[j], idx.records[i].q[j], 1e-6);
  }
}

TEST(IndexImages, BatchingAndOrderDoNotMatter) {
  const auto owned = calibrated_tiny_model();
  const QpmModel& model = *owned;
  const auto samples = tiny_samples(5, 16, 8);
  const ImageSpec spec = tiny_spec();
  const FeatureIndex whole = index_images(model, samples, spec, 32);
  std::vector<ReidSample> reversed(samples.rbegin(), samples.rend());
  const FeatureIndex rev = index_images(model, reversed, spec, 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = whole.records[i];
    const auto& b = rev.records[samples.size() - 1 - i];
    for (std::size_t j = 0; j < a.f.size(); ++j) EXPECT_NEAR(a.f[j], b.f[j], 1e-9);
    for (std::size_t j = 0; j < a.g.size(); ++j) EXPECT_NEAR(a.g[j], b.g[j], 1e-9);
  }
}

}  // namespace
}  // namespace qpm
