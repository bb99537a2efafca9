#pragma once

#include <cstdint>

#include "dproxy/diffmath.hpp"
#include "dproxy/ioformats.hpp"

namespace dproxy::proxy {

/// One base proxy row per sample. Every row starts as a copy of the
/// placeholder-token embedding; without one, a seeded unit vector is used.
Tensor2<float> init_base(const io::DatasetBundle& bundle, std::uint64_t seed);

/// Softmax weights alpha_ik over candidates at temperature tau_alpha.
template <typename T>
diff::Var<T> attention_weights(diff::Var<T> base_rows, diff::Var<T> candidates, T tau_alpha);

/// w_i = sum_k alpha_ik c_k. Throws EmptyCandidateSet.
template <typename T>
diff::Var<T> derive_proxies(diff::Var<T> base_rows, diff::Var<T> candidates, T tau_alpha);

/// (1/B) sum_i |w_i - c_bar|^2, c_bar the mean candidate. Throws EmptyCandidateSet.
template <typename T>
diff::Var<T> loss_user(diff::Var<T> proxies, diff::Var<T> candidates);

/// (1/B) sum_i log sum_{j != i} exp(f_i . w_j / sigma). Throws BatchTooSmall.
template <typename T>
diff::Var<T> loss_concept(diff::Var<T> fused, diff::Var<T> proxies, T sigma);

// Value-level conveniences.
template <typename T>
Tensor2<T> attention_weights(const Tensor2<T>& base, const Tensor2<T>& candidates, T tau_alpha);
template <typename T>
Tensor2<T> derive_proxies(const Tensor2<T>& base, const Tensor2<T>& candidates, T tau_alpha);
template <typename T>
T loss_user(const Tensor2<T>& proxies, const Tensor2<T>& candidates);
template <typename T>
T loss_concept(const Tensor2<T>& fused, const Tensor2<T>& proxies, T sigma);

struct DriftBound {
  double max_drift = 0.0;  // max_i |sum_k alpha_ik (c'_k - c_k)|
  double bound = 0.0;      // max_k |c'_k - c_k|
};

/// Proxy movement caused by replacing candidates with alpha held fixed.
DriftBound frozen_alpha_drift(const Tensor2<double>& alpha, const Tensor2<double>& before, const Tensor2<double>& after);

}  // namespace dproxy::proxy
