#include "dproxy/fusion.hpp"

#include <cmath>

#include "dproxy/rng.hpp"

namespace dproxy::fusion {

using diff::Binder;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

void FusionConfig::validate() const {
  if (dim < 2) throw Error(ErrorCode::ShapeMismatch, "fusion: dim must be at least 2");
  if (heads == 0 || dim % heads != 0) {
    throw Error(ErrorCode::ShapeMismatch,
                "fusion: dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (mode == FusionMode::Gated && layers == 0) throw Error(ErrorCode::ShapeMismatch, "fusion: needs at least one layer");
}

std::size_t default_heads(std::size_t dim) { return dim < 8 ? 2 : 4; }

std::string names::layer(std::size_t l, char stream, const std::string& leaf) {
  return "fusion.l" + std::to_string(l) + "." + stream + "." + leaf;
}

namespace {

template <typename T>
Tensor2<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor2<T> w(fan_in, fan_out);
  for (auto& x : w.data) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  return w;
}

// 0.5 * [I; I] (2d x d): averages the two halves of a concatenated row.
template <typename T>
Tensor2<T> averaging_projection(std::size_t d) {
  Tensor2<T> w(2 * d, d);
  for (std::size_t j = 0; j < d; ++j) {
    w(j, j) = T(0.5);
    w(d + j, j) = T(0.5);
  }
  return w;
}

template <typename T>
Tensor2<double> to_double(const Tensor2<T>& t) {
  return t.template cast<double>();
}

template <typename T>
struct AttentionResult {
  Var<T> out;
  Tensor2<double> mean_map;
};

// MultiHead(queries, keys_values, keys_values) over the batch dimension.
template <typename T>
AttentionResult<T> multi_head(Binder<T>& bind, const FusionConfig& cfg, std::size_t l, char stream, Var<T> queries,
                              Var<T> keys_values) {
  const std::size_t dh = cfg.dim / cfg.heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Var<T> q = diff::matmul(queries, bind(names::layer(l, stream, "W_Q")));
  Var<T> k = diff::matmul(keys_values, bind(names::layer(l, stream, "W_K")));
  Var<T> v = diff::matmul(keys_values, bind(names::layer(l, stream, "W_V")));

  const std::size_t b = queries.rows();
  Tensor2<double> mean_map(b, keys_values.rows());
  Var<T> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var<T> qh = diff::slice_cols(q, h * dh, dh);
    Var<T> kh = diff::slice_cols(k, h * dh, dh);
    Var<T> vh = diff::slice_cols(v, h * dh, dh);
    Var<T> att = diff::softmax_rows(diff::scale(diff::matmul_nt(qh, kh), scale));
    for (std::size_t i = 0; i < mean_map.data.size(); ++i)
      mean_map.data[i] += static_cast<double>(att.value().data[i]) / static_cast<double>(cfg.heads);
    Var<T> oh = diff::matmul(att, vh);
    heads = h == 0 ? oh : diff::concat_cols(heads, oh);
  }
  return {diff::matmul(heads, bind(names::layer(l, stream, "W_O"))), std::move(mean_map)};
}

// x + sigmoid([x; attn] W_g + b_g) * attn
template <typename T>
Var<T> gated_residual(Binder<T>& bind, std::size_t l, char stream, Var<T> x, Var<T> attn, const FuseHooks& hooks) {
  Var<T> gate;
  if (hooks.gate_preactivation) {
    Tensor2<T> pre(x.rows(), x.cols(), static_cast<T>(*hooks.gate_preactivation));
    gate = diff::sigmoid(bind.tape().constant(std::move(pre)));
  } else {
    Var<T> pre = diff::add_rowvec(diff::matmul(diff::concat_cols(x, attn), bind(names::layer(l, stream, "gate.W"))),
                                  bind(names::layer(l, stream, "gate.b")));
    gate = diff::sigmoid(pre);
  }
  return diff::add(x, diff::hadamard(gate, attn));
}

// LayerNorm(x + FFN(x)), FFN = ReLU(x W1 + b1) W2 + b2
template <typename T>
Var<T> refine(Binder<T>& bind, const FusionConfig& cfg, std::size_t l, char stream, Var<T> x) {
  Var<T> hidden = diff::relu(
      diff::add_rowvec(diff::matmul(x, bind(names::layer(l, stream, "ffn.W1"))), bind(names::layer(l, stream, "ffn.b1"))));
  Var<T> ffn =
      diff::add_rowvec(diff::matmul(hidden, bind(names::layer(l, stream, "ffn.W2"))), bind(names::layer(l, stream, "ffn.b2")));
  return diff::layernorm_rows(diff::add(x, ffn), static_cast<T>(cfg.ln_eps));
}

}  // namespace

template <typename T>
void register_params(ParamStore<T>& store, const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  Rng rng = make_rng(seed, "fusion-init");
  store.add(names::kTextProjection, averaging_projection<T>(d));
  if (cfg.mode == FusionMode::Concat) {
    store.add(names::kConcatProjection, averaging_projection<T>(d));
    return;
  }
  store.add(names::kLogTau, Tensor2<T>(1, 1, static_cast<T>(std::log(cfg.tau_init))));
  const std::size_t hidden = cfg.ffn_mult * d;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (char s : {'v', 't'}) {
      for (const char* leaf : {"W_Q", "W_K", "W_V", "W_O"}) store.add(names::layer(l, s, leaf), xavier<T>(d, d, rng));
      store.add(names::layer(l, s, "gate.W"), xavier<T>(2 * d, d, rng));
      store.add(names::layer(l, s, "gate.b"), Tensor2<T>(1, d, static_cast<T>(cfg.gate_bias_init)));
      store.add(names::layer(l, s, "ffn.W1"), xavier<T>(d, hidden, rng));
      store.add(names::layer(l, s, "ffn.b1"), Tensor2<T>(1, hidden));
      store.add(names::layer(l, s, "ffn.W2"), xavier<T>(hidden, d, rng));
      store.add(names::layer(l, s, "ffn.b2"), Tensor2<T>(1, d));
    }
  }
}

template <typename T>
Var<T> compose_text_tokens(Binder<T>& bind, Var<T> text, Var<T> proxies) {
  if (text.rows() != proxies.rows() || text.cols() != proxies.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "compose_text_tokens: text and proxies must have the same shape");
  }
  return diff::matmul(diff::concat_cols(text, proxies), bind(names::kTextProjection));
}

template <typename T>
FusionVars<T> fuse(Binder<T>& bind, const FusionConfig& cfg, Var<T> visual, Var<T> text_tokens, const FuseHooks& hooks) {
  cfg.validate();
  if (visual.rows() != text_tokens.rows() || visual.cols() != cfg.dim || text_tokens.cols() != cfg.dim) {
    throw Error(ErrorCode::ShapeMismatch, "fuse: visual and text tokens must both be batch x " + std::to_string(cfg.dim));
  }
  if (visual.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "fuse: empty batch");

  FusionVars<T> out;
  if (cfg.mode == FusionMode::Concat) {
    out.visual_out = visual;
    out.text_out = text_tokens;
    out.fused = diff::matmul(diff::concat_cols(visual, text_tokens), bind(names::kConcatProjection));
    out.lambda = bind.tape().constant(Tensor2<T>(visual.rows(), 1, T(0.5)));
    return out;
  }

  Var<T> v = visual;
  Var<T> t = text_tokens;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerTrace trace;
    trace.v_in = to_double(v.value());
    trace.t_in = to_double(t.value());
    auto v_att = multi_head(bind, cfg, l, 'v', v, t);
    auto t_att = multi_head(bind, cfg, l, 't', t, v);
    trace.v_attn = to_double(v_att.out.value());
    trace.t_attn = to_double(t_att.out.value());
    trace.attn_v = std::move(v_att.mean_map);
    trace.attn_t = std::move(t_att.mean_map);

    Var<T> v_gated = gated_residual(bind, l, 'v', v, v_att.out, hooks);
    Var<T> t_gated = gated_residual(bind, l, 't', t, t_att.out, hooks);
    trace.v_gated = to_double(v_gated.value());
    trace.t_gated = to_double(t_gated.value());

    v = refine(bind, cfg, l, 'v', v_gated);
    t = refine(bind, cfg, l, 't', t_gated);
    out.layers.push_back(std::move(trace));
  }

  // lambda = sigmoid(<T^L, V^L> / tau), tau = exp(log_tau)
  Var<T> inv_tau = diff::exp(diff::scale(bind(names::kLogTau), T(-1)));
  out.lambda = diff::sigmoid(diff::mul_scalar(diff::row_dot(t, v), inv_tau));
  out.fused = diff::scalar_mix(out.lambda, t, v);
  out.visual_out = v;
  out.text_out = t;
  return out;
}

template <typename T>
FusionOutput<T> fuse_values(const Tensor2<T>& visual, const Tensor2<T>& text_tokens, ParamStore<T>& params,
                            const FusionConfig& cfg, const FuseHooks& hooks) {
  Tape<T> tape;
  Binder<T> bind(tape, params);
  auto vars = fuse(bind, cfg, tape.constant(visual), tape.constant(text_tokens), hooks);
  return {vars.visual_out.value(), vars.text_out.value(), vars.fused.value(), vars.lambda.value(),
          std::move(vars.layers)};
}

template <typename T>
Tensor2<T> compose_text_tokens_values(const Tensor2<T>& text, const Tensor2<T>& proxies, ParamStore<T>& params) {
  Tape<T> tape;
  Binder<T> bind(tape, params);
  return compose_text_tokens(bind, tape.constant(text), tape.constant(proxies)).value();
}

GradientStructureReport gradient_structure_report(const Tensor2<double>& visual, const Tensor2<double>& text_tokens,
                                                  ParamStore<double>& params, const FusionConfig& cfg) {
  if (cfg.layers != 1 || cfg.mode != FusionMode::Gated) {
    throw Error(ErrorCode::ConfigInvalid, "gradient_structure_report: requires a single gated layer");
  }
  if (visual.rows < 2) throw Error(ErrorCode::BatchTooSmall, "gradient_structure_report: batch must be >= 2");
  const std::string wq = names::layer(0, 't', "W_Q");
  const std::size_t b = visual.rows, d = visual.cols;

  // Alignment loss (1/B) sum_i (1 - cos(F_i, v_i)) as a function of the store.
  auto align_loss = [&](Tape<double>& tape, ParamStore<double>& store) {
    Binder<double> bind(tape, store);
    Var<double> v = tape.constant(visual);
    auto out = fuse(bind, cfg, v, tape.constant(text_tokens));
    return diff::affine(diff::mean_all(diff::cosine_rows(out.fused, v)), -1.0, 1.0);
  };

  GradientStructureReport rep;
  params.zero_grad();
  Tensor2<double> fused;
  {
    Tape<double> tape(true);
    Binder<double> bind(tape, params);
    Var<double> v = tape.constant(visual);
    auto out = fuse(bind, cfg, v, tape.constant(text_tokens));
    fused = out.fused.value();
    const auto& map = out.layers.front().attn_t;
    for (std::size_t i = 0; i < b; ++i) {
      rep.mean_diagonal_attention += map(i, i) / static_cast<double>(b);
      for (std::size_t j = 0; j < b; ++j)
        rep.max_attention_deviation = std::max(rep.max_attention_deviation, std::abs(map(i, j) - 1.0 / static_cast<double>(b)));
    }
    tape.backward(diff::affine(diff::mean_all(diff::cosine_rows(out.fused, v)), -1.0, 1.0));
  }
  rep.degenerate = rep.max_attention_deviation < 1e-9;
  rep.gradient = params.at(wq).grad;

  // Dominant term: sum_i (v_i . t_i) v_i t_i^T Lambda_i, Lambda_i = -1 / (B |f_i| |v_i|).
  rep.dominant = Tensor2<double>(d, d);
  for (std::size_t i = 0; i < b; ++i) {
    double vt = 0.0, nf = 0.0, nv = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      vt += visual(i, j) * text_tokens(i, j);
      nf += fused(i, j) * fused(i, j);
      nv += visual(i, j) * visual(i, j);
    }
    const double lam = -1.0 / (static_cast<double>(b) * std::sqrt(nf) * std::sqrt(nv));
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) rep.dominant(r, c) += vt * visual(i, r) * text_tokens(i, c) * lam;
  }

  auto flat_cos = [&](bool transpose) {
    double dot = 0.0, ng = 0.0, nd = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        const double g = rep.gradient(r, c);
        const double m = transpose ? rep.dominant(c, r) : rep.dominant(r, c);
        dot += g * m;
        ng += g * g;
        nd += m * m;
      }
    }
    if (ng == 0.0 || nd == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(ng * nd), -1.0, 1.0);
  };
  rep.cosine = flat_cos(false);
  rep.cosine_transposed = flat_cos(true);

  // Central differences over the W_Q entries.
  auto& w = params.at(wq);
  const double h = 1e-5;
  for (std::size_t k = 0; k < w.value.size(); ++k) {
    const double saved = w.value.data[k];
    w.value.data[k] = saved + h;
    double up, down;
    {
      Tape<double> tape(true);
      up = align_loss(tape, params).item();
    }
    w.value.data[k] = saved - h;
    {
      Tape<double> tape(true);
      down = align_loss(tape, params).item();
    }
    w.value.data[k] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = rep.gradient.data[k];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    rep.fd_max_rel_error = std::max(rep.fd_max_rel_error, std::abs(numeric - analytic) / denom);
  }
  params.zero_grad();
  return rep;
}

#define DPROXY_INSTANTIATE_FUSION(T)                                                                       \
  template void register_params<T>(ParamStore<T>&, const FusionConfig&, std::uint64_t);                    \
  template Var<T> compose_text_tokens<T>(Binder<T>&, Var<T>, Var<T>);                                      \
  template FusionVars<T> fuse<T>(Binder<T>&, const FusionConfig&, Var<T>, Var<T>, const FuseHooks&);       \
  template FusionOutput<T> fuse_values<T>(const Tensor2<T>&, const Tensor2<T>&, ParamStore<T>&,            \
                                          const FusionConfig&, const FuseHooks&);                          \
  template Tensor2<T> compose_text_tokens_values<T>(const Tensor2<T>&, const Tensor2<T>&, ParamStore<T>&);

DPROXY_INSTANTIATE_FUSION(float)
DPROXY_INSTANTIATE_FUSION(double)

}  // namespace dproxy::fusion
