#pragma once

#include <span>
#include <vector>

#include "dproxy/tensor.hpp"

namespace dproxy::metrics {

enum class NmiNormalization {
  Geometric,   // I / sqrt(H(U) H(V))
  Arithmetic,  // 2I / (H(U) + H(V))
};

/// Normalized mutual information with natural-log entropies. Two
/// single-cluster partitions score 1 by convention (logged); one
/// single-cluster partition against a non-trivial one scores 0.
/// Throws LengthMismatch, or InvalidPartition for n < 2 or negative labels.
double nmi(std::span<const int> predicted, std::span<const int> truth,
           NmiNormalization norm = NmiNormalization::Geometric);

/// Fraction of unordered sample pairs on which the partitions agree.
double rand_index(std::span<const int> predicted, std::span<const int> truth);

/// Index of the candidate with the highest cosine similarity per feature
/// row; ties go to the lowest index. Throws ShapeMismatch.
std::vector<int> zeroshot_assign(const Tensor2<float>& features, const Tensor2<float>& candidates);

}  // namespace dproxy::metrics
