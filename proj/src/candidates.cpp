#include "dproxy/candidates.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dproxy/clustering.hpp"
#include "dproxy/log.hpp"
#include "dproxy/rng.hpp"

namespace dproxy::candidates {

CandidatePool CandidatePool::from_file(const io::CandidateFile& file) {
  io::validate_candidates(file, file.embeddings.cols);
  CandidatePool pool;
  pool.words = file.words;
  pool.embeddings = file.embeddings;
  pool.active.assign(file.words.size(), true);
  return pool;
}

std::size_t CandidatePool::active_count() const {
  return static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
}

std::vector<std::size_t> CandidatePool::active_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < active.size(); ++i)
    if (active[i]) idx.push_back(i);
  return idx;
}

std::vector<std::string> CandidatePool::active_words() const {
  std::vector<std::string> out;
  for (auto i : active_indices()) out.push_back(words[i]);
  return out;
}

Tensor2<float> CandidatePool::active_embeddings() const {
  const auto idx = active_indices();
  return gather_rows(embeddings, std::span<const std::size_t>(idx));
}

std::vector<bool> CandidatePool::mask_at_epoch(int epoch) const {
  const HistoryEntry* latest = nullptr;
  for (const auto& h : history)
    if (h.epoch < epoch) latest = &h;
  if (latest == nullptr) return std::vector<bool>(words.size(), true);
  const std::set<std::string> keep(latest->retained.begin(), latest->retained.end());
  std::vector<bool> mask(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) mask[i] = keep.contains(words[i]);
  return mask;
}

std::vector<double> score_candidates(const Tensor2<double>& candidates, const Tensor2<double>& centroids) {
  if (centroids.rows == 0) throw Error(ErrorCode::ZeroNormCentroid, "no centroids to score against");
  if (candidates.cols != centroids.cols) throw Error(ErrorCode::ShapeMismatch, "candidate/centroid dims differ");
  auto norm = [](std::span<const double> r) {
    double s = 0.0;
    for (double x : r) s += x * x;
    return std::sqrt(s);
  };
  std::vector<double> cn(centroids.rows);
  for (std::size_t j = 0; j < centroids.rows; ++j) {
    cn[j] = norm(centroids.row(j));
    if (cn[j] == 0.0) throw Error(ErrorCode::ZeroNormCentroid, "centroid " + std::to_string(j) + " has zero norm");
  }
  std::vector<double> scores(candidates.rows);
  std::vector<double> cos(centroids.rows);
  for (std::size_t i = 0; i < candidates.rows; ++i) {
    const double ni = norm(candidates.row(i));
    for (std::size_t j = 0; j < centroids.rows; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < candidates.cols; ++k) dot += candidates(i, k) * centroids(j, k);
      cos[j] = ni > 0.0 ? dot / (ni * cn[j]) : 0.0;
    }
    // Summing in sorted order makes the score exactly invariant to centroid order.
    std::sort(cos.begin(), cos.end());
    double s = 0.0;
    for (double c : cos) s += c;
    scores[i] = std::clamp(s / static_cast<double>(centroids.rows), -1.0, 1.0);
  }
  return scores;
}

std::size_t retain_count(std::size_t active, std::size_t num_classes) {
  const std::size_t half = active / 2;
  if (half >= num_classes) return half;
  return std::min(active, std::max(num_classes, active - half));
}

UpdateOutcome update_pool(CandidatePool& pool, const Tensor2<double>& proxies, std::size_t num_classes, int epoch,
                          std::uint64_t run_seed) {
  UpdateOutcome out;
  const auto idx = pool.active_indices();
  if (idx.size() <= num_classes) {
    log::info("candidate update at epoch " + std::to_string(epoch) + ": pool already at " +
              std::to_string(idx.size()) + " candidates; nothing to prune");
    out.status = UpdateStatus::PoolExhausted;
    out.retained = idx.size();
    return out;
  }

  bool distinct = false;
  for (std::size_t i = 1; i < proxies.rows && !distinct; ++i)
    distinct = !std::equal(proxies.row(i).begin(), proxies.row(i).end(), proxies.row(0).begin());
  if (!distinct || proxies.rows < num_classes) {
    log::warn("candidate update at epoch " + std::to_string(epoch) + " skipped: proxies are degenerate");
    out.status = UpdateStatus::DegenerateProxies;
    out.retained = idx.size();
    return out;
  }

  clustering::KMeansOptions opt;
  opt.restarts = 1;
  const auto km = clustering::kmeans(proxies, num_classes, derive_seed(run_seed, "candidate-kmeans",
                                                                       static_cast<std::uint64_t>(epoch)),
                                     opt);

  const Tensor2<double> active = pool.active_embeddings().cast<double>();
  out.scores = score_candidates(active, km.centroids);

  std::vector<std::size_t> order(idx.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return out.scores[a] > out.scores[b]; });
  const std::size_t keep = retain_count(idx.size(), num_classes);
  std::vector<bool> survive(idx.size(), false);
  for (std::size_t r = 0; r < keep; ++r) survive[order[r]] = true;

  HistoryEntry entry;
  entry.epoch = epoch;
  for (std::size_t a = 0; a < idx.size(); ++a) {
    if (survive[a]) {
      entry.retained.push_back(pool.words[idx[a]]);
    } else {
      pool.active[idx[a]] = false;
    }
  }
  pool.history.push_back(std::move(entry));
  out.retained = keep;
  log::debug("candidate update at epoch " + std::to_string(epoch) + ": " + std::to_string(idx.size()) + " -> " +
             std::to_string(keep));
  return out;
}

}  // namespace dproxy::candidates
