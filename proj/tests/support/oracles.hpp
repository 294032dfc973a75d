#pragma once

// Scalar-loop reference implementations. Nothing here calls into the
// library; every formula is written out element by element.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace qpm::oracle {

inline constexpr double kEps = 1e-8;

using Vec = std::vector<double>;

inline double cosine_distance(const Vec& a, const Vec& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + kEps);
}

/// Row k of a flattened [K,dim] buffer.
inline Vec row(const Vec& flat, int k, int dim) {
  return Vec(flat.begin() + static_cast<long>(k) * dim,
             flat.begin() + static_cast<long>(k + 1) * dim);
}

/// Quality-weighted average of per-part cosine distances.
inline double part_distance(const Vec& fa, const Vec& qa, const Vec& fb, const Vec& qb) {
  const int k = static_cast<int>(qa.size());
  const int d = static_cast<int>(fa.size()) / k;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < k; ++i) {
    const double w = qa[i] * qb[i];
    num += w * cosine_distance(row(fa, i, d), row(fb, i, d));
    den += w;
  }
  return num / (den + kEps);
}

/// Quality-normalised sum of part vectors.
inline Vec coarse_global(const Vec& parts, const Vec& q) {
  const int k = static_cast<int>(q.size());
  const int c = static_cast<int>(parts.size()) / k;
  double total = 0.0;
  for (double v : q) total += v;
  Vec h(c, 0.0);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < c; ++j) h[j] += (q[i] / total) * parts[i * c + j];
  }
  return h;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// maps [C,H,W] flattened; returns [H*W] with sigmoid(<G[:,p], h>).
inline Vec attention_map(const Vec& maps, int c, int hw, const Vec& h) {
  Vec m(hw);
  for (int p = 0; p < hw; ++p) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += maps[ch * hw + p] * h[ch];
    m[p] = sigmoid(s);
  }
  return m;
}

inline Vec apply_attention(const Vec& maps, int c, int hw, const Vec& m) {
  Vec out(maps.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out[ch * hw + p] = m[p] * maps[ch * hw + p] + maps[ch * hw + p];
  }
  return out;
}

/// Mean of a [C,h,w] stripe block of a [C,H,W] map, rows [r0, r1).
inline Vec stripe_mean(const Vec& maps, int c, int h, int w, int r0, int r1) {
  Vec out(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int y = r0; y < r1; ++y) {
      for (int x = 0; x < w; ++x) s += maps[(ch * h + y) * w + x];
    }
    out[ch] = s / ((r1 - r0) * w);
  }
  return out;
}

struct PairFeatures {
  Vec first, second;
};

/// Pair weights from the product of both images' qualities, applied to each
/// image's own part vectors.
inline PairFeatures pairwise_global(const Vec& ga, const Vec& qa, const Vec& gb, const Vec& qb) {
  const int k = static_cast<int>(qa.size());
  const int c = static_cast<int>(ga.size()) / k;
  double total = 0.0;
  for (int i = 0; i < k; ++i) total += qa[i] * qb[i];
  PairFeatures out{Vec(c, 0.0), Vec(c, 0.0)};
  for (int i = 0; i < k; ++i) {
    const double w = qa[i] * qb[i] / total;
    for (int j = 0; j < c; ++j) {
      out.first[j] += w * ga[i * c + j];
      out.second[j] += w * gb[i * c + j];
    }
  }
  return out;
}

inline double global_distance(const Vec& ga, const Vec& qa, const Vec& gb, const Vec& qb) {
  const PairFeatures p = pairwise_global(ga, qa, gb, qb);
  return cosine_distance(p.first, p.second);
}

inline double final_distance(double gamma, double part, double global) {
  return gamma * part + (1.0 - gamma) * global;
}

struct Record {
  int id = 0, cam = 0;
  Vec f, q, g;
};

/// Exhaustive ranking: stage 1 by part distance (ties by index); the first n
/// are then ordered by the final distance among themselves, with ties kept in
/// stage-1 order. Insertion sort on purpose.
inline std::vector<int> two_stage_order(const Record& query, const std::vector<Record>& gallery,
                                        int n, double gamma) {
  const int m = static_cast<int>(gallery.size());
  std::vector<double> d1(m);
  for (int i = 0; i < m; ++i) d1[i] = part_distance(query.f, query.q, gallery[i].f, gallery[i].q);
  std::vector<int> order;
  for (int i = 0; i < m; ++i) {
    auto pos = order.end();
    while (pos != order.begin() && d1[*(pos - 1)] > d1[i]) --pos;
    order.insert(pos, i);
  }
  n = std::min(n, m);
  std::vector<int> head;
  std::vector<double> dfin(m, 0.0);
  for (int r = 0; r < n; ++r) {
    const int i = order[r];
    dfin[i] = final_distance(gamma, d1[i], global_distance(query.g, query.q, gallery[i].g,
                                                           gallery[i].q));
    auto pos = head.end();
    while (pos != head.begin() && dfin[*(pos - 1)] > dfin[i]) --pos;
    head.insert(pos, i);
  }
  std::copy(head.begin(), head.end(), order.begin());
  return order;
}

struct Scored {
  bool valid = false;
  int first_hit = -1;
  double ap = 0.0;
};

/// Drops same-id-same-camera entries (standard protocol) and scores what is
/// left. AP is the mean of precision@k over the ranks k that hold a match.
inline Scored score(int qid, int qcam, const std::vector<int>& order,
                    const std::vector<std::pair<int, int>>& gallery_idcam, bool exclude_same_cam) {
  std::vector<bool> match;
  for (int idx : order) {
    const auto [gid, gcam] = gallery_idcam[idx];
    if (exclude_same_cam && gid == qid && gcam == qcam) continue;
    match.push_back(gid == qid);
  }
  Scored s;
  const long total = std::count(match.begin(), match.end(), true);
  if (total == 0) return s;
  s.valid = true;
  double sum = 0.0;
  for (std::size_t k = 0; k < match.size(); ++k) {
    if (!match[k]) continue;
    if (s.first_hit < 0) s.first_hit = static_cast<int>(k);
    const long hits_so_far = std::count(match.begin(), match.begin() + static_cast<long>(k) + 1, true);
    sum += static_cast<double>(hits_so_far) / static_cast<double>(k + 1);
  }
  s.ap = sum / static_cast<double>(total);
  return s;
}

struct Metrics {
  std::vector<double> cmc;
  double mAP = 0.0;
  int valid = 0;
};

inline Metrics summarize(const std::vector<Scored>& per_query, int max_rank) {
  Metrics m;
  m.cmc.assign(max_rank, 0.0);
  double ap = 0.0;
  for (const auto& s : per_query) {
    if (!s.valid) continue;
    ++m.valid;
    ap += s.ap;
    for (int r = 0; r < max_rank; ++r) {
      if (s.first_hit <= r) m.cmc[r] += 1.0;
    }
  }
  if (m.valid > 0) {
    for (double& v : m.cmc) v /= m.valid;
    m.mAP = ap / m.valid;
  }
  return m;
}

inline Vec uniform(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace qpm::oracle
