#include "dproxy/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dproxy/log.hpp"

namespace dproxy::metrics {

namespace {

void check_pair(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "partitions have " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " entries");
  }
  if (a.size() < 2) throw Error(ErrorCode::InvalidPartition, "partitions need at least two samples");
  const auto neg = [](int x) { return x < 0; };
  if (std::any_of(a.begin(), a.end(), neg) || std::any_of(b.begin(), b.end(), neg)) {
    throw Error(ErrorCode::InvalidPartition, "labels must be non-negative");
  }
}

// Dense relabelling in order of first appearance keeps table sizes small.
std::vector<std::size_t> compact(std::span<const int> labels, std::size_t& count) {
  std::map<int, std::size_t> ids;
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = ids.emplace(labels[i], ids.size());
    out[i] = it->second;
  }
  count = ids.size();
  return out;
}

double entropy(const std::vector<double>& counts, double n) {
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace

double nmi(std::span<const int> predicted, std::span<const int> truth, NmiNormalization norm) {
  check_pair(predicted, truth);
  std::size_t ku = 0, kv = 0;
  const auto u = compact(predicted, ku);
  const auto v = compact(truth, kv);
  const double n = static_cast<double>(u.size());

  std::vector<double> table(ku * kv, 0.0), cu(ku, 0.0), cv(kv, 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    table[u[i] * kv + v[i]] += 1.0;
    cu[u[i]] += 1.0;
    cv[v[i]] += 1.0;
  }
  const double hu = entropy(cu, n);
  const double hv = entropy(cv, n);
  if (ku == 1 && kv == 1) {
    log::debug("nmi: both partitions are single-cluster; returning 1 by convention");
    return 1.0;
  }
  if (hu == 0.0 || hv == 0.0) return 0.0;

  double mi = 0.0;
  for (std::size_t a = 0; a < ku; ++a) {
    for (std::size_t b = 0; b < kv; ++b) {
      const double nab = table[a * kv + b];
      if (nab > 0.0) mi += (nab / n) * std::log(n * nab / (cu[a] * cv[b]));
    }
  }
  const double denom = norm == NmiNormalization::Geometric ? std::sqrt(hu * hv) : 0.5 * (hu + hv);
  return std::clamp(mi / denom, 0.0, 1.0);
}

double rand_index(std::span<const int> predicted, std::span<const int> truth) {
  check_pair(predicted, truth);
  std::size_t ku = 0, kv = 0;
  const auto u = compact(predicted, ku);
  const auto v = compact(truth, kv);
  const auto pairs = [](double c) { return c * (c - 1.0) / 2.0; };

  std::vector<double> table(ku * kv, 0.0), cu(ku, 0.0), cv(kv, 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    table[u[i] * kv + v[i]] += 1.0;
    cu[u[i]] += 1.0;
    cv[v[i]] += 1.0;
  }
  double both = 0.0, same_u = 0.0, same_v = 0.0;
  for (double c : table) both += pairs(c);
  for (double c : cu) same_u += pairs(c);
  for (double c : cv) same_v += pairs(c);
  const double total = pairs(static_cast<double>(u.size()));
  // agreements = pairs together in both + pairs apart in both
  const double agree = total + 2.0 * both - same_u - same_v;
  return agree / total;
}

std::vector<int> zeroshot_assign(const Tensor2<float>& features, const Tensor2<float>& candidates) {
  if (candidates.rows < 1) throw Error(ErrorCode::ShapeMismatch, "zeroshot_assign: no candidates");
  if (features.cols != candidates.cols) {
    throw Error(ErrorCode::ShapeMismatch, "zeroshot_assign: feature dim " + std::to_string(features.cols) +
                                              " != candidate dim " + std::to_string(candidates.cols));
  }
  std::vector<double> cnorm(candidates.rows);
  for (std::size_t k = 0; k < candidates.rows; ++k) {
    double s = 0.0;
    for (float x : candidates.row(k)) s += static_cast<double>(x) * x;
    cnorm[k] = std::sqrt(s);
  }
  std::vector<int> out(features.rows, 0);
  for (std::size_t i = 0; i < features.rows; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < candidates.rows; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < features.cols; ++j)
        dot += static_cast<double>(features(i, j)) * static_cast<double>(candidates(k, j));
      const double cos = cnorm[k] > 0.0 ? dot / cnorm[k] : 0.0;
      if (cos > best) {
        best = cos;
        out[i] = static_cast<int>(k);
      }
    }
  }
  return out;
}

}  // namespace dproxy::metrics
