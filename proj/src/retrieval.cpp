#include "qpm/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "qpm/agfe.hpp"
#include "qpm/error.hpp"
#include "qpm/isa.hpp"
#include "qpm/ops.hpp"
#include "qpm/part_branch.hpp"

namespace qpm {

static_assert(std::endian::native == std::endian::little, "feature dumps assume little endian");

std::string to_string(Protocol p) { return p == Protocol::partial ? "partial" : "standard"; }

Protocol protocol_from_string(const std::string& s) {
  if (s == "standard") return Protocol::standard;
  if (s == "partial") return Protocol::partial;
  throw ConfigError("unknown protocol '" + s + "' (expected standard|partial)");
}

void RetrievalConfig::validate() const {
  if (n < 1) throw ConfigError("re-ranking depth n must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0,1]");
  if (max_rank < 1) throw ConfigError("max_rank must be >= 1");
}

FeatureIndex index_images(const QpmModel& model, std::span<const ReidSample> samples,
                          const ImageSpec& spec, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  const ModelConfig& mc = model.config();
  if (spec.height != mc.backbone.input_height || spec.width != mc.backbone.input_width) {
    throw ConfigError("image size does not match the model input size");
  }
  const int k = mc.parts(), d = mc.embed_dim, c = mc.global_channels;
  FeatureIndex index{k, d, c, {}};
  index.records.reserve(samples.size());
  NoGradGuard guard;
  const std::size_t per = 3 * static_cast<std::size_t>(spec.height) * spec.width;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const int count = static_cast<int>(std::min<std::size_t>(batch_size, samples.size() - start));
    Tensor images({count, 3, spec.height, spec.width});
    for (int i = 0; i < count; ++i) {
      const Tensor t = to_tensor(sample_pixels(samples[start + i]), spec);
      std::copy(t.values().begin(), t.values().end(), images.data() + i * per);
    }
    ModelOutputs out = model.forward(Var(std::move(images)), Mode::eval);
    Var global_parts = out.global_parts;
    if (!global_parts.defined()) {
      const IsaOutputs isa = model.attention().forward(out.feature_map, out.part.q, mc.use_isa);
      global_parts = ops::stripe_pool(isa.attended, k);
    }
    const Tensor& f = out.part.f.value();
    const Tensor& q = out.part.q.value();
    const Tensor& g = global_parts.value();
    for (int i = 0; i < count; ++i) {
      GalleryRecord r;
      r.id = samples[start + i].id;
      r.cam = samples[start + i].cam;
      r.f.assign(f.data() + static_cast<std::size_t>(i) * k * d,
                 f.data() + static_cast<std::size_t>(i + 1) * k * d);
      r.q.assign(q.data() + static_cast<std::size_t>(i) * k, q.data() + static_cast<std::size_t>(i + 1) * k);
      r.g.assign(g.data() + static_cast<std::size_t>(i) * k * c,
                 g.data() + static_cast<std::size_t>(i + 1) * k * c);
      index.records.push_back(std::move(r));
    }
  }
  return index;
}

namespace {

int record_parts(const GalleryRecord& a, const GalleryRecord& b) {
  if (a.q.empty() || a.q.size() != b.q.size() || a.f.size() != b.f.size() ||
      a.g.size() != b.g.size()) {
    throw ConfigError("records have different shapes");
  }
  return static_cast<int>(a.q.size());
}

std::vector<double> pooled(const GalleryRecord& r, bool quality_weighted) {
  const std::size_t k = r.q.size();
  if (quality_weighted) return coarse_global(r.g, r.q);
  return coarse_global(r.g, std::vector<double>(k, 1.0));
}

}  // namespace

double part_distance(const GalleryRecord& a, const GalleryRecord& b) {
  const int k = record_parts(a, b);
  return quality_weighted_distance(part_cosine_distances(a.f, b.f, k), a.q, b.q);
}

double global_distance(const GalleryRecord& a, const GalleryRecord& b, GlobalMode mode) {
  record_parts(a, b);
  switch (mode) {
    case GlobalMode::agfe: return adaptive_global_distance(a.g, a.q, b.g, b.q);
    case GlobalMode::gap: return cosine_distance(pooled(a, false), pooled(b, false));
    case GlobalMode::si: return cosine_distance(pooled(a, true), pooled(b, true));
    case GlobalMode::none: break;
  }
  throw ConfigError("a model without a global branch has no global distance");
}

double final_distance(const GalleryRecord& a, const GalleryRecord& b, double gamma,
                      GlobalMode mode) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0,1]");
  return gamma * part_distance(a, b) + (1.0 - gamma) * global_distance(a, b, mode);
}

namespace {

std::vector<int> stable_order(const std::vector<double>& dist) {
  std::vector<int> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return dist[x] < dist[y]; });
  return order;
}

std::vector<double> part_distances(const GalleryRecord& query,
                                   std::span<const GalleryRecord> gallery) {
  std::vector<double> d(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) d[i] = part_distance(query, gallery[i]);
  return d;
}

}  // namespace

std::vector<Candidate> stage1_rank(const GalleryRecord& query,
                                   std::span<const GalleryRecord> gallery, int n) {
  if (gallery.empty()) throw ConfigError("gallery is empty");
  if (n < 1) throw ConfigError("n must be >= 1");
  const std::vector<double> d = part_distances(query, gallery);
  const std::vector<int> order = stable_order(d);
  const std::size_t top = std::min<std::size_t>(n, gallery.size());
  std::vector<Candidate> out(top);
  for (std::size_t i = 0; i < top; ++i) out[i] = {order[i], d[order[i]]};
  return out;
}

RankingResult search(const GalleryRecord& query, std::span<const GalleryRecord> gallery,
                     const RetrievalConfig& cfg, GlobalMode mode) {
  cfg.validate();
  if (gallery.empty()) throw ConfigError("gallery is empty");
  RankingResult r;
  r.gamma = cfg.gamma;
  r.stage1 = part_distances(query, gallery);
  r.order = stable_order(r.stage1);
  r.n = static_cast<int>(std::min<std::size_t>(cfg.n, gallery.size()));
  r.final_distances.resize(r.n);
  if (mode == GlobalMode::none) {
    for (int i = 0; i < r.n; ++i) r.final_distances[i] = r.stage1[r.order[i]];
    return r;
  }
  std::vector<std::pair<double, int>> top(r.n);
  for (int i = 0; i < r.n; ++i) {
    const int idx = r.order[i];
    const double dg = global_distance(query, gallery[idx], mode);
    ++r.global_evaluations;
    top[i] = {cfg.gamma * r.stage1[idx] + (1.0 - cfg.gamma) * dg, idx};
  }
  std::stable_sort(top.begin(), top.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  for (int i = 0; i < r.n; ++i) {
    r.final_distances[i] = top[i].first;
    r.order[i] = top[i].second;
  }
  return r;
}

QueryOutcome score_ranking(IdCam query, std::span<const int> order, std::span<const IdCam> gallery,
                           Protocol protocol) {
  QueryOutcome out;
  int rank = 0, hits = 0;
  double precision_sum = 0.0;
  for (int idx : order) {
    const IdCam& g = gallery[idx];
    const bool same_id = g.id == query.id;
    if (protocol == Protocol::standard && same_id && g.cam == query.cam) continue;
    ++rank;
    if (!same_id) continue;
    ++hits;
    if (out.first_hit < 0) out.first_hit = rank - 1;
    precision_sum += static_cast<double>(hits) / rank;
  }
  out.valid = hits > 0;
  out.ap = out.valid ? precision_sum / hits : 0.0;
  return out;
}

EvalReport summarize(std::span<const QueryOutcome> outcomes, int max_rank) {
  EvalReport rep;
  const int len = std::max(max_rank, 10);
  std::vector<double> hits(len, 0.0);
  rep.queries = outcomes.size();
  double ap_sum = 0.0;
  for (const auto& o : outcomes) {
    if (!o.valid) {
      ++rep.skipped_queries;
      rep.ap.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    ++rep.valid_queries;
    rep.ap.push_back(o.ap);
    ap_sum += o.ap;
    for (int k = o.first_hit; k < len; ++k) hits[k] += 1.0;
  }
  if (rep.valid_queries > 0) {
    for (double& h : hits) h /= static_cast<double>(rep.valid_queries);
    rep.mAP = ap_sum / static_cast<double>(rep.valid_queries);
  }
  rep.rank1 = hits[0];
  rep.rank5 = hits[4];
  rep.rank10 = hits[9];
  rep.cmc.assign(hits.begin(), hits.begin() + max_rank);
  return rep;
}

EvalReport evaluate(std::span<const GalleryRecord> queries, std::span<const GalleryRecord> gallery,
                    const RetrievalConfig& cfg, GlobalMode mode, unsigned threads) {
  cfg.validate();
  if (gallery.empty()) throw ConfigError("gallery is empty");
  std::vector<IdCam> labels(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) labels[i] = {gallery[i].id, gallery[i].cam};
  std::vector<QueryOutcome> outcomes(queries.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const RankingResult r = search(queries[i], gallery, cfg, mode);
      outcomes[i] = score_ranking({queries[i].id, queries[i].cam}, r.order, labels, cfg.protocol);
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, queries.size())));
  if (threads <= 1) {
    work(0, queries.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (queries.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(queries.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return summarize(outcomes, cfg.max_rank);
}

namespace {

constexpr char kMagic[4] = {'Q', 'P', 'M', 'F'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("feature dump truncated");
  return v;
}

void put_values(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> take_values(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw FormatError("feature dump truncated");
  }
  return v;
}

}  // namespace

void write_features(const std::filesystem::path& path, const FeatureIndex& index) {
  const std::size_t kd = static_cast<std::size_t>(index.parts) * index.embed_dim;
  const std::size_t kc = static_cast<std::size_t>(index.parts) * index.channels;
  for (const auto& r : index.records) {
    if (r.f.size() != kd || r.q.size() != static_cast<std::size_t>(index.parts) || r.g.size() != kc) {
      throw FormatError("record does not match the index dimensions");
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put(os, kVersion);
  put(os, static_cast<std::uint32_t>(index.parts));
  put(os, static_cast<std::uint32_t>(index.embed_dim));
  put(os, static_cast<std::uint32_t>(index.channels));
  put(os, static_cast<std::uint64_t>(index.records.size()));
  for (const auto& r : index.records) {
    put(os, static_cast<std::int32_t>(r.id));
    put(os, static_cast<std::int32_t>(r.cam));
    put_values(os, r.f);
    put_values(os, r.q);
    put_values(os, r.g);
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

FeatureIndex read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a feature dump");
  }
  const auto version = take<std::uint32_t>(is);
  if (version != kVersion) {
    throw FormatError("unsupported feature dump version " + std::to_string(version));
  }
  FeatureIndex index;
  index.parts = static_cast<int>(take<std::uint32_t>(is));
  index.embed_dim = static_cast<int>(take<std::uint32_t>(is));
  index.channels = static_cast<int>(take<std::uint32_t>(is));
  const auto count = take<std::uint64_t>(is);
  if (index.parts < 1 || index.embed_dim < 1 || index.channels < 1) {
    throw FormatError("feature dump has invalid dimensions");
  }
  const std::size_t k = index.parts;
  for (std::uint64_t i = 0; i < count; ++i) {
    GalleryRecord r;
    r.id = take<std::int32_t>(is);
    r.cam = take<std::int32_t>(is);
    r.f = take_values(is, k * index.embed_dim);
    r.q = take_values(is, k);
    r.g = take_values(is, k * index.channels);
    index.records.push_back(std::move(r));
  }
  return index;
}

}  // namespace qpm
