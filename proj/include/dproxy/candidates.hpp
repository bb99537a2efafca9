#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dproxy/ioformats.hpp"

namespace dproxy::candidates {

struct HistoryEntry {
  int epoch = 0;
  std::vector<std::string> retained;
};

/// Candidate words with their (preloaded) embeddings and an active mask.
/// Pruned candidates never come back; the embedding table is never
/// recomputed, only re-sliced.
struct CandidatePool {
  std::vector<std::string> words;
  Tensor2<float> embeddings;
  std::vector<bool> active;
  std::vector<HistoryEntry> history;

  static CandidatePool from_file(const io::CandidateFile& file);

  std::size_t size() const { return words.size(); }
  std::size_t active_count() const;
  std::vector<std::size_t> active_indices() const;
  std::vector<std::string> active_words() const;
  Tensor2<float> active_embeddings() const;
  /// The mask that was in force during `epoch` (updates apply at the end of
  /// their epoch, so the entry for epoch e governs epochs > e).
  std::vector<bool> mask_at_epoch(int epoch) const;
};

enum class UpdateStatus { Updated, PoolExhausted, DegenerateProxies };

struct UpdateOutcome {
  UpdateStatus status = UpdateStatus::Updated;
  std::vector<double> scores;  // per active candidate, in pool order
  std::size_t retained = 0;
};

/// s_i = (1/M) sum_j cos(c_i, mu_j). Independent of centroid order.
/// Throws ZeroNormCentroid.
std::vector<double> score_candidates(const Tensor2<double>& candidates, const Tensor2<double>& centroids);

/// Survivors after halving `active` candidates with floor M.
std::size_t retain_count(std::size_t active, std::size_t num_classes);

/// One dynamic-management step: K-means(proxies, M), score the active
/// candidates against the centroids, keep the top half (stable on ties).
/// Active == M is a logged no-op (PoolExhausted); identical proxies skip
/// the update (DegenerateProxies).
UpdateOutcome update_pool(CandidatePool& pool, const Tensor2<double>& proxies, std::size_t num_classes, int epoch,
                          std::uint64_t run_seed);

}  // namespace dproxy::candidates
