#include "qpm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "qpm/agfe.hpp"
#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

void EraseParams::validate() const {
  if (!(probability >= 0.0 && probability <= 1.0)) {
    throw ConfigError("erase probability must be in [0,1]");
  }
  if (!(area_min > 0.0 && area_min <= area_max && area_max <= 1.0)) {
    throw ConfigError("erase area range must satisfy 0 < min <= max <= 1");
  }
  if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) {
    throw ConfigError("erase aspect range must satisfy 0 < min <= max");
  }
}

void TrainConfig::validate() const {
  if (P < 1 || A < 1) throw ConfigError("P and A must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be positive");
  if (lr_decay_period < 1) throw ConfigError("lr_decay_period must be >= 1");
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw ConfigError("flip probability must be in [0,1]");
  }
  if (iterations_per_epoch < 0) throw ConfigError("iterations_per_epoch must be >= 0");
  if ((losses.part_tp || losses.global_tp) && (P < 2 || A < 2)) {
    throw ConfigError("triplet losses need P >= 2 and A >= 2");
  }
  erase.validate();
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.base_lr * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_period);
}

IdentityIndex::IdentityIndex(std::span<const int> labels) {
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
    auto [it, fresh] = groups_.try_emplace(labels[i]);
    if (fresh) ids_.push_back(labels[i]);
    it->second.push_back(i);
  }
}

std::vector<int> pk_sample(const IdentityIndex& index, int P, int A, std::mt19937_64& rng) {
  if (P < 1 || A < 1) throw ConfigError("P and A must be positive");
  const auto& ids = index.identities();
  if (static_cast<int>(ids.size()) < P) {
    throw SamplingError("need " + std::to_string(P) + " identities, dataset has " +
                        std::to_string(ids.size()));
  }
  std::vector<int> chosen;
  std::sample(ids.begin(), ids.end(), std::back_inserter(chosen), P, rng);
  std::shuffle(chosen.begin(), chosen.end(), rng);
  std::vector<int> batch;
  batch.reserve(static_cast<std::size_t>(P) * A);
  for (int id : chosen) {
    const auto& pool = index.images(id);
    if (static_cast<int>(pool.size()) >= A) {
      std::vector<int> pick;
      std::sample(pool.begin(), pool.end(), std::back_inserter(pick), A, rng);
      std::shuffle(pick.begin(), pick.end(), rng);
      batch.insert(batch.end(), pick.begin(), pick.end());
    } else {
      std::uniform_int_distribution<std::size_t> any(0, pool.size() - 1);
      for (int a = 0; a < A; ++a) batch.push_back(pool[any(rng)]);
    }
  }
  return batch;
}

std::optional<EraseRegion> random_erase(Tensor& chw, const EraseParams& params,
                                        std::mt19937_64& rng) {
  if (chw.rank() != 3) throw ConfigError("random_erase expects a [C,H,W] tensor");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (params.probability <= 0.0 || u(rng) >= params.probability) return std::nullopt;
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  std::uniform_real_distribution<double> area(params.area_min, params.area_max);
  std::uniform_real_distribution<double> log_aspect(std::log(params.aspect_min),
                                                    std::log(params.aspect_max));
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = area(rng) * h * w;
    const double aspect = std::exp(log_aspect(rng));
    const int eh = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int ew = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
    EraseRegion r{std::uniform_int_distribution<int>(0, w - ew)(rng),
                  std::uniform_int_distribution<int>(0, h - eh)(rng), ew, eh};
    for (int ch = 0; ch < c; ++ch) {
      for (int y = r.y; y < r.y + r.height; ++y) {
        double* row = chw.data() + (static_cast<std::size_t>(ch) * h + y) * w;
        std::fill(row + r.x, row + r.x + r.width, params.fill);
      }
    }
    return r;
  }
  return std::nullopt;
}

void horizontal_flip(Tensor& chw) {
  if (chw.rank() != 3) throw ConfigError("horizontal_flip expects a [C,H,W] tensor");
  const int rows = chw.dim(0) * chw.dim(1), w = chw.dim(2);
  for (int r = 0; r < rows; ++r) {
    double* row = chw.data() + static_cast<std::size_t>(r) * w;
    std::reverse(row, row + w);
  }
}

LossBreakdown LossTerms::values() const {
  auto v = [](const Var& x) { return x.defined() ? x.item() : 0.0; };
  LossBreakdown b{v(part_id), v(part_tp), v(global_id), v(sg_id), v(global_tp), 0.0};
  b.total = v(total);
  return b;
}

Var single_image_global(GlobalMode mode, const Var& global_parts, const Var& q) {
  if (mode == GlobalMode::si) return ops::quality_weighted_pool(global_parts, q);
  if (mode == GlobalMode::gap) {
    return ops::quality_weighted_pool(global_parts,
                                      Var(Tensor({global_parts.dim(0), global_parts.dim(1)}, 1.0)));
  }
  throw ConfigError("single_image_global: mode " + to_string(mode) + " has no per-image feature");
}

LossTerms compute_losses(const QpmModel& model, const ModelOutputs& out,
                         std::span<const int> labels, const TrainConfig& cfg) {
  const ModelConfig& mc = model.config();
  const LossToggles& on = cfg.losses;
  LossTerms t;
  if (on.part_id) t.part_id = part_id_loss(model.part_branch(), out.part.f, labels);
  if (on.part_tp) t.part_tp = part_triplet_loss(out.part.f, out.part.q, labels, cfg.margin);
  if (mc.global_mode != GlobalMode::none) {
    if (on.global_id && mc.use_isa) t.global_id = global_id_loss(model.attention(), out.isa.h_hat, labels);
    if (mc.global_mode == GlobalMode::agfe) {
      if (on.sg_id || on.global_tp) {
        Var pairs = pairwise_global_features(out.global_parts, out.global_q);
        if (on.sg_id) {
          t.sg_id = sg_id_loss(model.global_classifier(), pairs, labels, cfg.sg_include_diagonal);
        }
        if (on.global_tp) t.global_tp = global_triplet_loss(pairs, labels, cfg.margin);
      }
    } else if (on.sg_id || on.global_tp) {
      Var feat = single_image_global(mc.global_mode, out.global_parts, out.global_q);
      if (on.sg_id) {
        t.sg_id = ops::cross_entropy(model.global_classifier()(feat), labels,
                                     static_cast<double>(labels.size()));
      }
      if (on.global_tp) {
        validate_pk_labels(labels);
        t.global_tp = ops::batch_hard_triplet(ops::cosine_distance_matrix(feat), labels, cfg.margin);
      }
    }
  }
  const std::vector<Var> terms{t.part_id, t.part_tp, t.global_id, t.sg_id, t.global_tp};
  t.total = ops::sum_scalars(terms);
  return t;
}

SgdOptimizer::SgdOptimizer(ParameterStore& store, double momentum)
    : store_(store), momentum_(momentum) {}

void SgdOptimizer::step(double lr) {
  for (const auto& [name, param] : store_.parameters()) {
    Var p = param;
    const Tensor& g = p.grad();
    if (g.empty()) continue;
    Tensor& w = p.mutable_value();
    if (momentum_ > 0.0) {
      auto [it, fresh] = velocity_.try_emplace(name, Tensor(w.shape(), 0.0));
      Tensor& v = it->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        w[i] -= lr * v[i];
      }
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
  }
}

std::map<int, int> contiguous_labels(std::span<const ReidSample> samples) {
  std::map<int, int> map;
  for (const auto& s : samples) map.try_emplace(s.id, static_cast<int>(map.size()));
  return map;
}

namespace {

std::vector<int> remap(std::span<const ReidSample> samples) {
  const auto map = contiguous_labels(samples);
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(map.at(s.id));
  return out;
}

// Decoded training tensors are kept in memory below this many doubles.
constexpr std::size_t kCacheBudget = std::size_t{1} << 27;

}  // namespace

Trainer::Trainer(QpmModel& model, const TrainConfig& cfg, std::span<const ReidSample> train,
                 const ImageSpec& spec)
    : model_(model),
      cfg_(cfg),
      train_(train),
      spec_(spec),
      labels_(remap(train)),
      index_(labels_),
      optimizer_(model.store(), cfg.momentum),
      sample_rng_(cfg.seed),
      augment_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate();
  if (train.empty()) throw DataError("training set is empty");
  const int classes = static_cast<int>(index_.identities().size());
  if (classes > model.config().num_classes) {
    throw ConfigError("training set has " + std::to_string(classes) +
                      " identities but the model was built for " +
                      std::to_string(model.config().num_classes));
  }
  const auto& bb = model.config().backbone;
  if (spec.height != bb.input_height || spec.width != bb.input_width) {
    throw ConfigError("image size does not match the backbone input size");
  }
  use_cache_ = train.size() * 3 * static_cast<std::size_t>(spec.height) * spec.width <= kCacheBudget;
  if (use_cache_) cache_.resize(train.size());
}

const Tensor& Trainer::base_tensor(int i) {
  if (use_cache_) {
    if (cache_[i].empty()) cache_[i] = to_tensor(sample_pixels(train_[i]), spec_);
    return cache_[i];
  }
  thread_local Tensor scratch;
  scratch = to_tensor(sample_pixels(train_[i]), spec_);
  return scratch;
}

Tensor Trainer::make_batch(std::span<const int> batch) {
  const std::size_t per = 3 * static_cast<std::size_t>(spec_.height) * spec_.width;
  Tensor images({static_cast<int>(batch.size()), 3, spec_.height, spec_.width});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tensor img = base_tensor(batch[b]);
    if (u(augment_rng_) < cfg_.flip_probability) horizontal_flip(img);
    random_erase(img, cfg_.erase, augment_rng_);
    std::copy(img.values().begin(), img.values().end(), images.data() + b * per);
  }
  return images;
}

LossBreakdown Trainer::step(std::span<const int> batch, double lr) {
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (int i : batch) labels.push_back(labels_[i]);
  Var images(make_batch(batch));
  optimizer_.zero_grad();
  const ModelOutputs out = model_.forward(images, Mode::train);
  const LossTerms terms = compute_losses(model_, out, labels, cfg_);
  const LossBreakdown values = terms.values();
  if (!std::isfinite(values.total)) diverged(iteration_, lr, values);
  if (terms.total.requires_grad()) backward(terms.total);
  optimizer_.step(lr);
  return values;
}

int Trainer::iterations_per_epoch() const {
  if (cfg_.iterations_per_epoch > 0) return cfg_.iterations_per_epoch;
  return std::max(1, static_cast<int>(train_.size()) / cfg_.batch_size());
}

EpochMetrics Trainer::run_epoch(int epoch) {
  epoch_ = epoch;
  const auto start = std::chrono::steady_clock::now();
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = learning_rate(cfg_, epoch);
  m.iterations = iterations_per_epoch();
  for (int it = 0; it < m.iterations; ++it) {
    iteration_ = it;
    const std::vector<int> batch = pk_sample(index_, cfg_.P, cfg_.A, sample_rng_);
    const LossBreakdown b = step(batch, m.lr);
    m.loss.part_id += b.part_id;
    m.loss.part_tp += b.part_tp;
    m.loss.global_id += b.global_id;
    m.loss.sg_id += b.sg_id;
    m.loss.global_tp += b.global_tp;
    m.loss.total += b.total;
  }
  for (double* v : {&m.loss.part_id, &m.loss.part_tp, &m.loss.global_id, &m.loss.sg_id,
                    &m.loss.global_tp, &m.loss.total}) {
    *v /= m.iterations;
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<EpochMetrics> Trainer::fit(std::ostream* log,
                                       const std::function<void(const EpochMetrics&)>& on_epoch) {
  std::vector<EpochMetrics> history;
  for (int e = 0; e < cfg_.epochs; ++e) {
    history.push_back(run_epoch(e));
    const EpochMetrics& m = history.back();
    if (log) {
      nlohmann::json row = {{"epoch", m.epoch},         {"lr", m.lr},
                            {"part_id", m.loss.part_id}, {"part_tp", m.loss.part_tp},
                            {"global_id", m.loss.global_id}, {"sg_id", m.loss.sg_id},
                            {"global_tp", m.loss.global_tp}, {"total", m.loss.total},
                            {"iterations", m.iterations}, {"seconds", m.seconds}};
      *log << row.dump() << '\n' << std::flush;
    }
    if (on_epoch) on_epoch(m);
  }
  return history;
}

void Trainer::diverged(int iteration, double lr, const LossBreakdown& loss) const {
  std::string where = "epoch " + std::to_string(epoch_);
  if (iteration >= 0) where += " iteration " + std::to_string(iteration);
  if (!cfg_.diagnostics_path.empty()) {
    nlohmann::json dump;
    dump["epoch"] = epoch_;
    dump["lr"] = lr;
    dump["loss"] = {{"part_id", loss.part_id}, {"part_tp", loss.part_tp},
                    {"global_id", loss.global_id}, {"sg_id", loss.sg_id},
                    {"global_tp", loss.global_tp}, {"total", loss.total}};
    for (const auto& [name, p] : model_.store().parameters()) {
      double max_abs = 0.0;
      bool finite = true;
      for (double v : p.value().values()) {
        finite = finite && std::isfinite(v);
        max_abs = std::max(max_abs, std::abs(v));
      }
      dump["parameters"][name] = {{"max_abs", max_abs}, {"finite", finite}};
    }
    std::ofstream(cfg_.diagnostics_path) << dump.dump(2) << '\n';
    where += ", state written to " + cfg_.diagnostics_path;
  }
  throw DivergenceError("non-finite loss at " + where);
}

}  // namespace qpm
