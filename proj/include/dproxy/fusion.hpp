#pragma once

// Gated cross-modal fusion.
//
// Each layer runs bidirectional multi-head attention across the samples of a
// batch (visual rows query the text rows and vice versa), a sigmoid-gated
// residual per stream, and a LayerNorm(x + FFN(x)) refinement. The two final
// streams are mixed per sample with lambda_i = sigmoid(<T_i, V_i> / tau).
//
// Parameters live in a ParamStore under the "fusion." prefix; matrices are
// stored input-major (y = x * W).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dproxy/diffmath.hpp"

namespace dproxy::fusion {

enum class FusionMode { Gated, Concat };

struct FusionConfig {
  std::size_t dim = 0;
  std::size_t heads = 4;
  std::size_t layers = 2;
  FusionMode mode = FusionMode::Gated;
  double ln_eps = 1e-5;
  double tau_init = 0.1;
  double gate_bias_init = -1.0;
  std::size_t ffn_mult = 4;

  /// Throws ShapeMismatch when dim is not divisible by heads.
  void validate() const;
};

/// 4 heads, or 2 when d < 8.
std::size_t default_heads(std::size_t dim);

/// Parameter names, exposed so callers and tests can address entries.
namespace names {
inline const std::string kTextProjection = "fusion.W_p";
inline const std::string kLogTau = "fusion.log_tau";
inline const std::string kConcatProjection = "fusion.concat.W";
/// stream is 'v' (visual queries) or 't' (text queries); leaf is e.g. "W_Q".
std::string layer(std::size_t l, char stream, const std::string& leaf);
}  // namespace names

/// Registers every fusion parameter with its initial value: Xavier-uniform
/// projections, zero FFN biases, gate bias -1, W_p = 0.5 [I; I], log(0.1).
template <typename T>
void register_params(diff::ParamStore<T>& store, const FusionConfig& cfg, std::uint64_t seed);

/// Test hooks.
struct FuseHooks {
  /// Replaces every gate pre-activation with this constant.
  std::optional<double> gate_preactivation;
};

struct LayerTrace {
  Tensor2<double> v_in, t_in;        // V^{l-1}, T^{l-1}
  Tensor2<double> v_attn, t_attn;    // attention outputs
  Tensor2<double> v_gated, t_gated;  // after the gated residual, before refinement
  Tensor2<double> attn_v, attn_t;    // head-averaged batch x batch attention maps
};

template <typename T>
struct FusionVars {
  diff::Var<T> visual_out;  // V^L
  diff::Var<T> text_out;    // T^L
  diff::Var<T> fused;       // F
  diff::Var<T> lambda;      // batch x 1
  std::vector<LayerTrace> layers;
};

/// t*_i = W_p^T [t_i; w_i] (batch x d).
template <typename T>
diff::Var<T> compose_text_tokens(diff::Binder<T>& bind, diff::Var<T> text, diff::Var<T> proxies);

template <typename T>
FusionVars<T> fuse(diff::Binder<T>& bind, const FusionConfig& cfg, diff::Var<T> visual, diff::Var<T> text_tokens,
                   const FuseHooks& hooks = {});

template <typename T>
struct FusionOutput {
  Tensor2<T> visual_out;
  Tensor2<T> text_out;
  Tensor2<T> fused;
  Tensor2<T> lambda;
  std::vector<LayerTrace> layers;
};

/// Forward pass without gradient bookkeeping.
template <typename T>
FusionOutput<T> fuse_values(const Tensor2<T>& visual, const Tensor2<T>& text_tokens, diff::ParamStore<T>& params,
                            const FusionConfig& cfg, const FuseHooks& hooks = {});

template <typename T>
Tensor2<T> compose_text_tokens_values(const Tensor2<T>& text, const Tensor2<T>& proxies, diff::ParamStore<T>& params);

/// Compares the alignment-loss gradient for the text-query projection of a
/// single-layer stack with the closed-form dominant term
/// sum_i v_i v_i^T t_i t_i^T Lambda_i. Informational; nothing is asserted.
struct GradientStructureReport {
  double cosine = 0.0;             // flattened-matrix cosine, gradient vs dominant term
  double cosine_transposed = 0.0;  // same against the transposed dominant term
  double fd_max_rel_error = 0.0;   // analytic gradient vs central differences
  double max_attention_deviation = 0.0;  // max |a_ij - 1/B| over the text-query map
  double mean_diagonal_attention = 0.0;
  bool degenerate = false;         // attention is uniform: no diagonal dominance
  Tensor2<double> gradient;
  Tensor2<double> dominant;
};

GradientStructureReport gradient_structure_report(const Tensor2<double>& visual, const Tensor2<double>& text_tokens,
                                                  diff::ParamStore<double>& params, const FusionConfig& cfg);

}  // namespace dproxy::fusion
