#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>

#include "qpm/config.hpp"
#include "qpm/error.hpp"
#include "qpm/experiment.hpp"
#include "qpm/training.hpp"
#include "support/criteria.hpp"
#include "support/gradcheck.hpp"

namespace qpm {
namespace {

using testing::random_tensor;
using testing::tiny_model_config;

std::vector<int> labels_of(int ids, int per) {
  std::vector<int> y;
  for (int i = 0; i < ids; ++i) {
    for (int j = 0; j < per; ++j) y.push_back(i);
  }
  return y;
}

TEST(PkSample, TwoByTwoFromThreeIdentities) {
  const auto y = labels_of(3, 5);
  IdentityIndex index(y);
  std::mt19937_64 rng(1);
  const auto batch = pk_sample(index, 2, 2, rng);
  ASSERT_EQ(batch.size(), 4u);
  std::map<int, std::set<int>> per_id;
  for (int i : batch) per_id[y[i]].insert(i);
  ASSERT_EQ(per_id.size(), 2u);
  for (const auto& [id, imgs] : per_id) EXPECT_EQ(imgs.size(), 2u);
}

TEST(PkSample, SingleImageIdentityIsRepeated) {
  const std::vector<int> y{0, 1, 1, 1, 1};
  IdentityIndex index(y);
  std::mt19937_64 rng(2);
  const auto batch = pk_sample(index, 2, 4, rng);
  EXPECT_EQ(std::count(batch.begin(), batch.end(), 0), 4);
}

TEST(PkSample, FixedSeedIsReproducible) {
  const auto y = labels_of(10, 6);
  IdentityIndex index(y);
  std::mt19937_64 a(3), b(3);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(pk_sample(index, 4, 3, a), pk_sample(index, 4, 3, b));
}

TEST(PkSample, TooFewIdentities) {
  const auto y = labels_of(2, 4);
  IdentityIndex index(y);
  std::mt19937_64 rng(4);
  EXPECT_THROW(pk_sample(index, 3, 2, rng), SamplingError);
}

TEST(RandomErase, ZeroProbabilityIsIdentity) {
  std::mt19937_64 rng(5);
  Tensor img = random_tensor({3, 16, 8}, rng);
  const Tensor before = img;
  EraseParams p;
  p.probability = 0.0;
  for (int t = 0; t < 10; ++t) EXPECT_FALSE(random_erase(img, p, rng));
  EXPECT_TRUE(img == before);
}

TEST(RandomErase, QuarterArea) {
  EraseParams p;
  p.probability = 1.0;
  p.area_min = p.area_max = 0.25;
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const int h = 40 + t, w = 24 + t;
    Tensor img({3, h, w}, 1.0);
    const auto r = random_erase(img, p, rng);
    ASSERT_TRUE(r);
    int erased = 0;
    for (int i = 0; i < h * w; ++i) erased += img[i] == 0.0;
    EXPECT_EQ(erased, r->width * r->height);
    // Rounding the sides can move the area by up to one row and one column.
    EXPECT_LE(std::abs(erased - 0.25 * h * w), r->width + r->height + 1.0);
  }
}

TEST(RandomErase, FixedSeedIsReproducible) {
  EraseParams p;
  p.probability = 1.0;
  std::mt19937_64 a(7), b(7);
  Tensor x({3, 32, 16}, 1.0), y({3, 32, 16}, 1.0);
  const auto ra = random_erase(x, p, a), rb = random_erase(y, p, b);
  ASSERT_TRUE(ra && rb);
  EXPECT_EQ(ra->x, rb->x);
  EXPECT_EQ(ra->y, rb->y);
  EXPECT_EQ(ra->width, rb->width);
  EXPECT_EQ(ra->height, rb->height);
  EXPECT_TRUE(x == y);
}

TEST(Flip, MirrorsColumns) {
  Tensor img({1, 1, 3}, std::vector<double>{1, 2, 3});
  horizontal_flip(img);
  EXPECT_EQ(img.storage(), (std::vector<double>{3, 2, 1}));
}

TEST(LearningRate, StepSchedule) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 0), 0.01);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 19), 0.01);
  EXPECT_NEAR(learning_rate(cfg, 20), 0.001, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 25), 0.001, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 45), 0.0001, 1e-16);
}

struct Batch {
  QpmModel model;
  Var images;
  std::vector<int> labels{0, 0, 1, 1};
  explicit Batch(const ModelConfig& cfg) : model(cfg) {
    std::mt19937_64 rng(8);
    images = Var(random_tensor({4, 3, cfg.backbone.input_height, cfg.backbone.input_width}, rng));
  }
  LossTerms losses(const TrainConfig& tc) {
    return compute_losses(model, model.forward(images, Mode::train), labels, tc);
  }
};

TEST(Losses, OnlyPartIdentity) {
  Batch b(tiny_model_config());
  TrainConfig tc;
  tc.losses = {true, false, false, false, false};
  const LossBreakdown v = b.losses(tc).values();
  EXPECT_EQ(v.total, v.part_id);
  EXPECT_EQ(v.part_tp + v.global_id + v.sg_id + v.global_tp, 0.0);
}

TEST(Losses, TotalIsSumOfTerms) {
  Batch b(tiny_model_config());
  const LossBreakdown v = b.losses(TrainConfig{}).values();
  for (double t : {v.part_id, v.part_tp, v.global_id, v.sg_id, v.global_tp}) {
    EXPECT_TRUE(std::isfinite(t));
  }
  EXPECT_GT(v.global_id, 0.0);
  EXPECT_GT(v.sg_id, 0.0);
  EXPECT_NEAR(v.total, v.sum(), 1e-7);
}

TEST(Losses, BaselineTripletUsesUnitQuality) {
  const auto rows = ablation_variants();
  const auto it = std::find_if(rows.begin(), rows.end(),
                               [](const auto& v) { return v.label == "Baseline(+triplet)"; });
  ASSERT_NE(it, rows.end());
  ExperimentConfig base;
  base.model = tiny_model_config();
  const ExperimentConfig cfg = apply_variant(base, *it);
  Batch b(cfg.model);
  const ModelOutputs out = b.model.forward(b.images, Mode::train);
  for (double q : out.part.q.value().values()) EXPECT_EQ(q, 1.0);
  const LossBreakdown v = compute_losses(b.model, out, b.labels, cfg.train).values();
  EXPECT_GT(v.part_tp, 0.0);
  EXPECT_EQ(v.global_id + v.sg_id + v.global_tp, 0.0);
  EXPECT_NEAR(v.total, v.part_id + v.part_tp, 1e-12);
}

TEST(Losses, PartBranchVariant) {
  const auto rows = ablation_variants();
  const auto it = std::find_if(rows.begin(), rows.end(),
                               [](const auto& v) { return v.label == "Part branch"; });
  ASSERT_NE(it, rows.end());
  const ExperimentConfig cfg = apply_variant(ExperimentConfig{}, *it);
  EXPECT_TRUE(cfg.model.use_quality);
  EXPECT_EQ(cfg.model.global_mode, GlobalMode::none);
  EXPECT_TRUE(cfg.train.losses.part_id && cfg.train.losses.part_tp);
  EXPECT_FALSE(cfg.train.losses.global_id || cfg.train.losses.sg_id || cfg.train.losses.global_tp);
  EXPECT_EQ(it->gamma, 1.0);
}

TEST(Losses, DetachedQualityOnlyReceivesPartGradients) {
  ModelConfig mc = tiny_model_config();
  mc.detach_global_quality = true;
  Batch b(mc);
  TrainConfig tc;
  tc.losses = {false, false, true, true, true};
  Var loss = b.losses(tc).total;
  backward(loss);
  for (const auto& [name, p] : b.model.store().parameters()) {
    if (name.rfind("part.quality.", 0) != 0) continue;
    for (double g : p.grad().values()) EXPECT_EQ(g, 0.0) << name;
  }
}

ReidDataset small_synth(int ids, int per) {
  SynthConfig sc;
  sc.num_identities = ids;
  sc.test_identities = 2;
  sc.images_per_identity = per;
  sc.height = 32;
  sc.width = 16;
  sc.seed = 3;
  return synth_generate(sc);
}

ModelConfig small_model(int classes) {
  ModelConfig mc;
  mc.backbone.input_height = 32;
  mc.backbone.input_width = 16;
  mc.backbone.output_channels = 16;
  mc.backbone.spatial_stride = 8;
  mc.backbone.parts = 2;
  mc.embed_dim = 16;
  mc.global_channels = 16;
  mc.num_classes = classes;
  mc.init_seed = 2;
  return mc;
}

ImageSpec spec_of(const ModelConfig& mc) {
  ImageSpec s;
  s.height = mc.backbone.input_height;
  s.width = mc.backbone.input_width;
  return s;
}

TEST(Trainer, LossDecreasesOnToySet) {
  const ReidDataset data = small_synth(8, 8);
  QpmModel model(small_model(8));
  TrainConfig tc;
  tc.P = 4;
  tc.A = 4;
  tc.epochs = 6;
  tc.iterations_per_epoch = 8;
  tc.base_lr = 0.05;
  tc.momentum = 0.9;
  Trainer trainer(model, tc, data.train, spec_of(model.config()));
  const auto history = trainer.fit();
  ASSERT_EQ(history.size(), 6u);
  EXPECT_LT(history.back().loss.total, 0.9 * history.front().loss.total);
}

TEST(Trainer, ZeroLearningRateKeepsWeights) {
  const ReidDataset data = small_synth(4, 4);
  QpmModel model(small_model(4));
  TrainConfig tc;
  tc.P = 2;
  tc.A = 2;
  tc.momentum = 0.9;
  Trainer trainer(model, tc, data.train, spec_of(model.config()));
  std::map<std::string, Tensor> before;
  for (const auto& [name, p] : model.store().parameters()) before[name] = p.value();
  const std::vector<int> batch{0, 1, 4, 5};
  trainer.step(batch, 0.0);
  trainer.step(batch, 0.0);
  for (const auto& [name, p] : model.store().parameters()) EXPECT_TRUE(p.value() == before[name]) << name;
}

TEST(Trainer, SameSeedSameHistory) {
  const ReidDataset data = small_synth(4, 4);
  auto run = [&] {
    QpmModel model(small_model(4));
    TrainConfig tc;
    tc.P = 2;
    tc.A = 2;
    tc.epochs = 2;
    tc.iterations_per_epoch = 2;
    tc.seed = 11;
    Trainer trainer(model, tc, data.train, spec_of(model.config()));
    std::vector<double> totals;
    for (const auto& m : trainer.fit()) totals.push_back(m.loss.total);
    return totals;
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, RejectsMismatchedImageSize) {
  const ReidDataset data = small_synth(4, 4);
  QpmModel model(small_model(4));
  ImageSpec wrong;
  EXPECT_THROW(Trainer(model, TrainConfig{}, data.train, wrong), ConfigError);
}

TEST(Tensor, StorageHasFixedAlignment) {
  std::vector<Tensor> keep;
  for (int n = 1; n < 40; n += 3) {
    keep.emplace_back(Shape{n}, 1.0);
    const auto addr = reinterpret_cast<std::uintptr_t>(keep.back().data());
    EXPECT_EQ(addr % EIGEN_MAX_ALIGN_BYTES, 0u) << n;
  }
}

TEST(Sgd, MomentumAccumulates) {
  ParameterStore store;
  Var w = store.add_parameter("w", Tensor({1}, 1.0));
  SgdOptimizer opt(store, 0.5);
  for (int t = 0; t < 2; ++t) {
    opt.zero_grad();
    w.mutable_grad() = Tensor({1}, 1.0);
    opt.step(0.1);
  }
  // v1 = 1, v2 = 1.5
  EXPECT_NEAR(w.value()[0], 1.0 - 0.1 - 0.15, 1e-15);
}

}  // namespace
}  // namespace qpm
