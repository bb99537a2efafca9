#include "dproxy/proxy.hpp"

#include <cmath>

#include "dproxy/rng.hpp"

namespace dproxy::proxy {

using diff::Tape;
using diff::Var;

Tensor2<float> init_base(const io::DatasetBundle& bundle, std::uint64_t seed) {
  const std::size_t d = bundle.dim();
  std::vector<float> seed_row(d);
  if (bundle.star_embedding) {
    auto row = bundle.star_embedding->row(0);
    std::copy(row.begin(), row.end(), seed_row.begin());
  } else {
    Rng rng = make_rng(seed, "proxy-init");
    std::vector<double> g(d);
    double s = 0.0;
    while (s == 0.0) {
      s = 0.0;
      for (auto& x : g) {
        x = standard_normal(rng);
        s += x * x;
      }
    }
    const double n = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) seed_row[j] = static_cast<float>(g[j] / n);
  }
  Tensor2<float> base(bundle.size(), d);
  for (std::size_t i = 0; i < base.rows; ++i) std::copy(seed_row.begin(), seed_row.end(), base.row(i).begin());
  return base;
}

template <typename T>
Var<T> attention_weights(Var<T> base_rows, Var<T> candidates, T tau_alpha) {
  if (candidates.rows() == 0) throw Error(ErrorCode::EmptyCandidateSet, "no active candidates");
  if (base_rows.cols() != candidates.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "proxies and candidates differ in dimension");
  }
  return diff::softmax_rows(diff::matmul_nt(base_rows, candidates), tau_alpha);
}

template <typename T>
Var<T> derive_proxies(Var<T> base_rows, Var<T> candidates, T tau_alpha) {
  return diff::matmul(attention_weights(base_rows, candidates, tau_alpha), candidates);
}

template <typename T>
Var<T> loss_user(Var<T> proxies, Var<T> candidates) {
  if (candidates.rows() == 0) throw Error(ErrorCode::EmptyCandidateSet, "no active candidates");
  if (proxies.rows() == 0) throw Error(ErrorCode::BatchTooSmall, "loss_user: empty batch");
  return diff::mean_all(diff::row_sqnorm(diff::sub_rowvec(proxies, diff::mean_rows(candidates))));
}

template <typename T>
Var<T> loss_concept(Var<T> fused, Var<T> proxies, T sigma) {
  if (fused.rows() < 2) throw Error(ErrorCode::BatchTooSmall, "loss_concept needs a batch of at least 2");
  if (!(sigma > T(0))) throw Error(ErrorCode::ConfigInvalid, "loss_concept: sigma must be positive");
  Var<T> logits = diff::scale(diff::matmul_nt(fused, proxies), T(1) / sigma);
  return diff::mean_all(diff::logsumexp_offdiag_rows(logits));
}

template <typename T>
Tensor2<T> attention_weights(const Tensor2<T>& base, const Tensor2<T>& candidates, T tau_alpha) {
  Tape<T> tape;
  return attention_weights(tape.constant(base), tape.constant(candidates), tau_alpha).value();
}

template <typename T>
Tensor2<T> derive_proxies(const Tensor2<T>& base, const Tensor2<T>& candidates, T tau_alpha) {
  Tape<T> tape;
  return derive_proxies(tape.constant(base), tape.constant(candidates), tau_alpha).value();
}

template <typename T>
T loss_user(const Tensor2<T>& proxies, const Tensor2<T>& candidates) {
  Tape<T> tape;
  return loss_user(tape.constant(proxies), tape.constant(candidates)).item();
}

template <typename T>
T loss_concept(const Tensor2<T>& fused, const Tensor2<T>& proxies, T sigma) {
  Tape<T> tape;
  return loss_concept(tape.constant(fused), tape.constant(proxies), sigma).item();
}

DriftBound frozen_alpha_drift(const Tensor2<double>& alpha, const Tensor2<double>& before, const Tensor2<double>& after) {
  if (!before.same_shape(after) || alpha.cols != before.rows) {
    throw Error(ErrorCode::ShapeMismatch, "frozen_alpha_drift: alpha must be n x K and candidate sets K x d");
  }
  DriftBound out;
  const std::size_t kc = before.rows, d = before.cols;
  for (std::size_t k = 0; k < kc; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (after(k, j) - before(k, j)) * (after(k, j) - before(k, j));
    out.bound = std::max(out.bound, std::sqrt(s));
  }
  for (std::size_t i = 0; i < alpha.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double delta = 0.0;
      for (std::size_t k = 0; k < kc; ++k) delta += alpha(i, k) * (after(k, j) - before(k, j));
      s += delta * delta;
    }
    out.max_drift = std::max(out.max_drift, std::sqrt(s));
  }
  return out;
}

#define DPROXY_INSTANTIATE_PROXY(T)                                                \
  template Var<T> attention_weights<T>(Var<T>, Var<T>, T);                         \
  template Var<T> derive_proxies<T>(Var<T>, Var<T>, T);                            \
  template Var<T> loss_user<T>(Var<T>, Var<T>);                                    \
  template Var<T> loss_concept<T>(Var<T>, Var<T>, T);                              \
  template Tensor2<T> attention_weights<T>(const Tensor2<T>&, const Tensor2<T>&, T); \
  template Tensor2<T> derive_proxies<T>(const Tensor2<T>&, const Tensor2<T>&, T);  \
  template T loss_user<T>(const Tensor2<T>&, const Tensor2<T>&);                   \
  template T loss_concept<T>(const Tensor2<T>&, const Tensor2<T>&, T);

DPROXY_INSTANTIATE_PROXY(float)
DPROXY_INSTANTIATE_PROXY(double)

}  // namespace dproxy::proxy
