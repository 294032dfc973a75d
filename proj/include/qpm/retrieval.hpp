#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qpm/data.hpp"
#include "qpm/model.hpp"

namespace qpm {

/// standard: gallery entries sharing the query's identity and camera are
/// ignored. partial: nothing is ignored (query and gallery come from
/// different capture sets).
enum class Protocol { standard, partial };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct RetrievalConfig {
  int n = 30;          ///< candidates re-ranked in stage 2
  double gamma = 0.6;  ///< weight of the part distance in the final distance
  Protocol protocol = Protocol::standard;
  int max_rank = 50;   ///< length of the reported CMC curve

  void validate() const;
};

/// Everything the distances need for one image; f is [K,d], q is [K] and
/// g is [K,C'], all row-major.
struct GalleryRecord {
  int id = 0;
  int cam = 0;
  std::vector<double> f;
  std::vector<double> q;
  std::vector<double> g;
};

struct FeatureIndex {
  int parts = 0;
  int embed_dim = 0;
  int channels = 0;
  std::vector<GalleryRecord> records;
};

/// Eval-mode features of `samples`, in order. The attention path is run even
/// for models without a global mode so every record carries g.
FeatureIndex index_images(const QpmModel& model, std::span<const ReidSample> samples,
                          const ImageSpec& spec, int batch_size = 32);

/// Quality-weighted part distance between two records.
double part_distance(const GalleryRecord& a, const GalleryRecord& b);
/// Cosine distance between the global features of a and b under `mode`
/// (pairwise product weights for agfe, plain or quality-weighted per-image
/// pooling for gap / si). Throws ConfigError for GlobalMode::none.
double global_distance(const GalleryRecord& a, const GalleryRecord& b, GlobalMode mode);
/// gamma * part + (1 - gamma) * global. gamma outside [0,1] is a ConfigError.
double final_distance(const GalleryRecord& a, const GalleryRecord& b, double gamma,
                      GlobalMode mode);

struct Candidate {
  int index = 0;
  double distance = 0.0;
};

/// The min(n, |gallery|) nearest records by part distance, ties by index.
std::vector<Candidate> stage1_rank(const GalleryRecord& query,
                                   std::span<const GalleryRecord> gallery, int n);

struct RankingResult {
  std::vector<int> order;             ///< every gallery index, best first
  std::vector<double> stage1;         ///< part distance per gallery index
  std::vector<double> final_distances;  ///< final distance of order[0..n)
  int n = 0;                          ///< re-ranked prefix length (clamped)
  double gamma = 0.0;
  std::size_t global_evaluations = 0;  ///< global distances computed in stage 2
};

/// Two-stage search: rank by part distance, then re-rank the first n by the
/// final distance. Equal final distances keep their stage-1 order. With
/// GlobalMode::none stage 2 is skipped.
RankingResult search(const GalleryRecord& query, std::span<const GalleryRecord> gallery,
                     const RetrievalConfig& cfg, GlobalMode mode);

struct QueryOutcome {
  bool valid = false;  ///< at least one scorable correct match exists
  int first_hit = -1;  ///< 0-based rank among scored entries
  double ap = 0.0;
};

struct IdCam {
  int id = 0;
  int cam = 0;
};

/// Scores one ranking. Entries excluded by the protocol are skipped without
/// consuming a rank.
QueryOutcome score_ranking(IdCam query, std::span<const int> order, std::span<const IdCam> gallery,
                           Protocol protocol);

struct EvalReport {
  std::vector<double> cmc;  ///< cmc[k] = fraction of valid queries hit within k+1
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  double mAP = 0.0;
  std::size_t queries = 0;
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;  ///< no correct match in the scorable gallery
  std::vector<double> ap;           ///< per query; NaN for skipped queries
};

EvalReport summarize(std::span<const QueryOutcome> outcomes, int max_rank);

/// Searches every query (in parallel over `threads`, 0 = hardware) and scores.
EvalReport evaluate(std::span<const GalleryRecord> queries, std::span<const GalleryRecord> gallery,
                    const RetrievalConfig& cfg, GlobalMode mode, unsigned threads = 0);

/// Binary dump: "QPMF", u32 version, u32 K, u32 d, u32 C', u64 count, then per
/// record i32 id, i32 cam, f64 f[K*d], f64 q[K], f64 g[K*C'] (little endian).
void write_features(const std::filesystem::path& path, const FeatureIndex& index);
FeatureIndex read_features(const std::filesystem::path& path);

}  // namespace qpm
