#include "dproxy/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dproxy/clustering.hpp"
#include "dproxy/log.hpp"
#include "dproxy/metrics.hpp"
#include "dproxy/proxy.hpp"
#include "dproxy/rng.hpp"

namespace dproxy::trainer {

using nlohmann::json;
using diff::Binder;
using diff::Tape;
using diff::Var;
namespace fs = std::filesystem;

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Both: return "both";
    case Modality::Text: return "text";
    case Modality::Visual: return "visual";
  }
  return "both";
}

Modality parse_modality(const std::string& s) {
  if (s == "both") return Modality::Both;
  if (s == "text" || s == "text_only") return Modality::Text;
  if (s == "visual" || s == "visual_only") return Modality::Visual;
  throw Error(ErrorCode::ConfigInvalid, "unknown modality \"" + s + "\" (expected both|text|visual)");
}

std::string to_string(fusion::FusionMode m) { return m == fusion::FusionMode::Concat ? "concat" : "gated"; }

fusion::FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "gated") return fusion::FusionMode::Gated;
  if (s == "concat") return fusion::FusionMode::Concat;
  throw Error(ErrorCode::ConfigInvalid, "unknown fusion mode \"" + s + "\" (expected gated|concat)");
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::ConfigInvalid, why); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (update_interval < 1) fail("update_interval must be >= 1");
  if (!no_dynamic && epochs % update_interval != 0) {
    fail("E not divisible by R (epochs " + std::to_string(epochs) + ", update_interval " +
         std::to_string(update_interval) + ")");
  }
  if (!no_dynamic && halvings() > 30) fail("E/R too large for the candidate pool");
  if (batch < 2) fail("batch must be >= 2");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be non-negative");
  if (!(tau_alpha > 0.0) || !std::isfinite(tau_alpha)) fail("tau_alpha must be positive");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("sigma must be positive");
  if (layers < 1) fail("layers must be >= 1");
  if (restarts < 1) fail("restarts must be >= 1");
  if (eval_runs < 1) fail("eval_runs must be >= 1");
}

void TrainConfig::validate_pool(std::size_t pool_size, std::size_t num_classes) const {
  validate();
  if (pool_size == 0) throw Error(ErrorCode::EmptyCandidateSet, "candidate pool is empty");
  if (no_dynamic) return;
  const std::size_t expected = (std::size_t{1} << halvings()) * num_classes;
  if (pool_size != expected) {
    throw Error(ErrorCode::ConfigInvalid, "initial candidate pool has " + std::to_string(pool_size) +
                                              " words but 2^(E/R)*M = " + std::to_string(expected));
  }
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"update_interval", update_interval},
          {"batch", batch},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"tau_alpha", tau_alpha},
          {"sigma", sigma},
          {"heads", heads},
          {"layers", layers},
          {"seed", seed},
          {"no_dynamic", no_dynamic},
          {"no_uconstraints", no_uconstraints},
          {"no_cconstraints", no_cconstraints},
          {"fusion", to_string(fusion)},
          {"modality", to_string(modality)},
          {"restarts", restarts},
          {"eval_runs", eval_runs}};
}

TrainConfig TrainConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigInvalid, "config must be a JSON object");
  const json known = TrainConfig{}.to_json();
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) throw Error(ErrorCode::ConfigInvalid, "unknown config key \"" + key + "\"");
  }
  TrainConfig c;
  try {
    c.epochs = doc.value("epochs", c.epochs);
    c.update_interval = doc.value("update_interval", c.update_interval);
    c.batch = doc.value("batch", c.batch);
    c.lr = doc.value("lr", c.lr);
    c.weight_decay = doc.value("weight_decay", c.weight_decay);
    c.tau_alpha = doc.value("tau_alpha", c.tau_alpha);
    c.sigma = doc.value("sigma", c.sigma);
    c.heads = doc.value("heads", c.heads);
    c.layers = doc.value("layers", c.layers);
    c.seed = doc.value("seed", c.seed);
    c.no_dynamic = doc.value("no_dynamic", c.no_dynamic);
    c.no_uconstraints = doc.value("no_uconstraints", c.no_uconstraints);
    c.no_cconstraints = doc.value("no_cconstraints", c.no_cconstraints);
    c.fusion = parse_fusion_mode(doc.value("fusion", to_string(c.fusion)));
    c.modality = parse_modality(doc.value("modality", to_string(c.modality)));
    c.restarts = doc.value("restarts", c.restarts);
    c.eval_runs = doc.value("eval_runs", c.eval_runs);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("malformed config: ") + e.what());
  }
  return c;
}

std::uint64_t TrainConfig::hash() const { return fnv1a64(to_json().dump()); }

double schedule_alpha(double t, double total_epochs) { return std::min(0.5, 0.1 + 0.4 * t / total_epochs); }

double schedule_beta(double t, double total_epochs) {
  return 0.1 * (1.0 - std::cos(std::numbers::pi * t / total_epochs));
}

fusion::FusionConfig fusion_config(const TrainConfig& cfg, std::size_t dim) {
  fusion::FusionConfig f;
  f.dim = dim;
  f.heads = cfg.heads == 0 ? fusion::default_heads(dim) : cfg.heads;
  f.layers = cfg.layers;
  f.mode = cfg.fusion;
  return f;
}

// ---------------------------------------------------------------------------
// Batching

namespace {

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += batch) {
    const std::size_t end = std::min(order.size(), b + batch);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() > 1 && out.back().size() < 2) {
    auto tail = std::move(out.back());
    out.pop_back();
    out.back().insert(out.back().end(), tail.begin(), tail.end());
  }
  return out;
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "batching", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return chunk(order, batch);
}

std::vector<std::vector<std::size_t>> ordered_batches(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  return chunk(order, batch);
}

LossWeights loss_weights(const TrainConfig& cfg, int epoch, const TrainHooks& hooks) {
  LossWeights w;
  if (hooks.zero_loss_weights) return {0.0, 0.0, 0.0};
  w.user = cfg.no_uconstraints ? 0.0 : schedule_alpha(epoch, cfg.epochs);
  w.concept_term = cfg.no_cconstraints ? 0.0 : schedule_beta(epoch, cfg.epochs);
  return w;
}

// ---------------------------------------------------------------------------
// Objective

template <typename T>
BatchLoss<T> batch_loss(Binder<T>& bind, const fusion::FusionConfig& fcfg, const Tensor2<T>& visual,
                        const Tensor2<T>& text, const std::vector<std::size_t>& idx, const Tensor2<T>& candidates,
                        const LossWeights& weights, T tau_alpha, T sigma) {
  Tape<T>& tape = bind.tape();
  const std::span<const std::size_t> rows(idx);
  Var<T> v = tape.constant(gather_rows(visual, rows));
  Var<T> t = tape.constant(gather_rows(text, rows));
  Var<T> c = tape.constant(candidates);
  Var<T> base = diff::gather_rows(bind(kBaseProxyName), idx);

  Var<T> w = proxy::derive_proxies(base, c, tau_alpha);
  Var<T> tokens = fusion::compose_text_tokens(bind, t, w);

  BatchLoss<T> out;
  out.fusion = fusion::fuse(bind, fcfg, v, tokens);
  out.align = diff::affine(diff::mean_all(diff::cosine_rows(out.fusion.fused, v)), T(-1), T(1));
  out.user = proxy::loss_user(w, c);
  out.concept_term = proxy::loss_concept(out.fusion.fused, w, sigma);
  out.total = diff::add(diff::add(diff::scale(out.align, static_cast<T>(weights.align)),
                                  diff::scale(out.user, static_cast<T>(weights.user))),
                        diff::scale(out.concept_term, static_cast<T>(weights.concept_term)));
  return out;
}

template BatchLoss<float> batch_loss<float>(Binder<float>&, const fusion::FusionConfig&, const Tensor2<float>&,
                                            const Tensor2<float>&, const std::vector<std::size_t>&,
                                            const Tensor2<float>&, const LossWeights&, float, float);
template BatchLoss<double> batch_loss<double>(Binder<double>&, const fusion::FusionConfig&, const Tensor2<double>&,
                                              const Tensor2<double>&, const std::vector<std::size_t>&,
                                              const Tensor2<double>&, const LossWeights&, double, double);

void Adam::step(diff::ParamStore<float>& params) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& p : params) {
    auto& [m, v] = moments_[p.name];
    if (m.empty()) {
      m.assign(p.value.size(), 0.0f);
      v.assign(p.value.size(), 0.0f);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]) + weight_decay_ * static_cast<double>(p.value.data[i]);
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = lr_ * (mi / c1) / (std::sqrt(vi / c2) + eps);
      p.value.data[i] = static_cast<float>(static_cast<double>(p.value.data[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

LambdaStats lambda_stats(const Tensor2<float>& lambda) {
  LambdaStats s;
  if (lambda.data.empty()) return s;
  s.min = s.max = lambda.data.front();
  double sum = 0.0;
  for (float x : lambda.data) {
    sum += x;
    s.min = std::min(s.min, static_cast<double>(x));
    s.max = std::max(s.max, static_cast<double>(x));
  }
  s.mean = sum / static_cast<double>(lambda.data.size());
  double var = 0.0;
  for (float x : lambda.data) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(lambda.data.size()));
  return s;
}

void copy_rows(const Tensor2<float>& src, const std::vector<std::size_t>& idx, Tensor2<float>& dst) {
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto from = src.row(r);
    std::copy(from.begin(), from.end(), dst.row(idx[r]).begin());
  }
}

std::string status_name(candidates::UpdateStatus s) {
  switch (s) {
    case candidates::UpdateStatus::Updated: return "updated";
    case candidates::UpdateStatus::PoolExhausted: return "pool_exhausted";
    case candidates::UpdateStatus::DegenerateProxies: return "degenerate_proxies";
  }
  return "updated";
}

// Full forward pass over the dataset in index-ordered evaluation batches.
void final_pass(const io::DatasetBundle& bundle, const TrainConfig& cfg, const fusion::FusionConfig& fcfg,
                TrainedState& state) {
  const std::size_t n = bundle.size(), d = bundle.dim();
  const Tensor2<float> cands = state.pool.active_embeddings();
  state.proxies = proxy::derive_proxies(state.params.at(kBaseProxyName).value, cands, static_cast<float>(cfg.tau_alpha));
  state.fused = Tensor2<float>(n, d);
  state.visual_out = Tensor2<float>(n, d);
  state.text_out = Tensor2<float>(n, d);
  state.lambda = Tensor2<float>(n, 1);
  for (const auto& idx : ordered_batches(n, cfg.batch)) {
    Tape<float> tape(false);
    Binder<float> bind(tape, state.params);
    const std::span<const std::size_t> rows(idx);
    Var<float> tokens = fusion::compose_text_tokens(bind, tape.constant(gather_rows(bundle.text, rows)),
                                                    tape.constant(gather_rows(state.proxies, rows)));
    auto out = fusion::fuse(bind, fcfg, tape.constant(gather_rows(bundle.visual, rows)), tokens);
    copy_rows(out.fused.value(), idx, state.fused);
    copy_rows(out.visual_out.value(), idx, state.visual_out);
    copy_rows(out.text_out.value(), idx, state.text_out);
    copy_rows(out.lambda.value(), idx, state.lambda);
  }
}

}  // namespace

const Tensor2<float>& TrainedState::features(Modality m) const {
  switch (m) {
    case Modality::Text: return text_out;
    case Modality::Visual: return visual_out;
    case Modality::Both: break;
  }
  return fused;
}

TrainResult train(const io::DatasetBundle& bundle, const std::string& concept_name, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  const auto& persp = bundle.perspective(concept_name);
  if (!persp.candidates) {
    throw Error(ErrorCode::SchemaError, "perspective \"" + concept_name + "\" has no candidate file");
  }
  return train(bundle, concept_name, candidates::CandidatePool::from_file(*persp.candidates), cfg, hooks);
}

TrainResult train(const io::DatasetBundle& bundle, const std::string& concept_name, candidates::CandidatePool pool,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
  const auto& persp = bundle.perspective(concept_name);
  const auto num_classes = static_cast<std::size_t>(persp.num_classes);
  cfg.validate_pool(pool.active_count(), num_classes);
  if (pool.embeddings.cols != bundle.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "candidate embeddings do not match the bundle dimension");
  }
  const auto fcfg = fusion_config(cfg, bundle.dim());
  fcfg.validate();

  TrainResult result;
  RunReport& report = result.report;
  report.dataset = bundle.name;
  report.concept_name = concept_name;
  report.config = cfg;
  report.config_hash = cfg.hash();

  TrainedState& state = result.state;
  state.pool = std::move(pool);
  fusion::register_params(state.params, fcfg, cfg.seed);
  state.params.add(kBaseProxyName, proxy::init_base(bundle, cfg.seed));

  Adam adam(cfg.lr, cfg.weight_decay);
  const auto tau_alpha = static_cast<float>(cfg.tau_alpha);
  const auto sigma = static_cast<float>(cfg.sigma);
  Tensor2<float> cands = state.pool.active_embeddings();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.alpha = schedule_alpha(epoch, cfg.epochs);
    rec.beta = schedule_beta(epoch, cfg.epochs);
    rec.active_candidates = cands.rows;
    const LossWeights weights = loss_weights(cfg, epoch, hooks);

    const auto batches = epoch_batches(bundle.size(), cfg.batch, cfg.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      state.params.zero_grad();
      Tape<float> tape(false);
      Binder<float> bind(tape, state.params);
      auto loss = batch_loss(bind, fcfg, bundle.visual, bundle.text, batches[b], cands, weights, tau_alpha, sigma);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b);
        report.failure = "non-finite loss at " + where;
        throw TrainingAborted("non-finite loss at " + where, report, epoch, b);
      }
      tape.backward(loss.total);
      adam.step(state.params);
      rec.loss_align += loss.align.item();
      rec.loss_user += loss.user.item();
      rec.loss_concept += loss.concept_term.item();
      rec.total += total;
    }
    const auto nb = static_cast<double>(batches.size());
    rec.loss_align /= nb;
    rec.loss_user /= nb;
    rec.loss_concept /= nb;
    rec.total /= nb;
    report.epochs.push_back(rec);

    if (!cfg.no_dynamic && epoch % cfg.update_interval == 0) {
      const Tensor2<double> proxies =
          proxy::derive_proxies(state.params.at(kBaseProxyName).value, cands, tau_alpha).cast<double>();
      CandidateEvent ev;
      ev.epoch = epoch;
      ev.before = state.pool.active_count();
      const auto outcome = candidates::update_pool(state.pool, proxies, num_classes, epoch, cfg.seed);
      ev.status = status_name(outcome.status);
      ev.after = state.pool.active_count();
      ev.retained = state.pool.active_words();
      report.candidate_events.push_back(std::move(ev));
      cands = state.pool.active_embeddings();
    }
  }

  final_pass(bundle, cfg, fcfg, state);
  report.lambda = lambda_stats(state.lambda);
  report.final_candidates = state.pool.active_words();
  return result;
}

json RunReport::to_json() const {
  json epochs_json = json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch},
                           {"alpha", e.alpha},
                           {"beta", e.beta},
                           {"loss_align", e.loss_align},
                           {"loss_user", e.loss_user},
                           {"loss_concept", e.loss_concept},
                           {"total", e.total},
                           {"active_candidates", e.active_candidates}});
  }
  json events = json::array();
  for (const auto& ev : candidate_events) {
    events.push_back(
        {{"epoch", ev.epoch}, {"status", ev.status}, {"before", ev.before}, {"after", ev.after}, {"retained", ev.retained}});
  }
  json doc = {{"dataset", dataset},
              {"concept", concept_name},
              {"config", config.to_json()},
              {"config_hash", config_hash},
              {"epochs", epochs_json},
              {"candidate_history", events},
              {"lambda", {{"mean", lambda.mean}, {"std", lambda.std}, {"min", lambda.min}, {"max", lambda.max}}},
              {"final_candidates", final_candidates}};
  if (failure) doc["failure"] = *failure;
  return doc;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

EvalOptions eval_options(const TrainConfig& cfg) { return {cfg.eval_runs, cfg.restarts, cfg.seed}; }

EvalReport evaluate(const Tensor2<float>& features, const io::DatasetBundle& bundle, const std::string& perspective,
                    const EvalOptions& opts) {
  const auto& persp = bundle.perspective(perspective);
  if (features.rows != persp.labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "feature rows do not match the label count");
  }
  if (opts.runs < 1) throw Error(ErrorCode::ConfigInvalid, "evaluation needs at least one run");
  EvalReport rep;
  rep.perspective = perspective;
  rep.num_classes = static_cast<std::size_t>(persp.num_classes);
  rep.runs = opts.runs;
  const Tensor2<double> points = features.cast<double>();
  clustering::KMeansOptions km;
  km.restarts = opts.restarts;
  for (std::size_t r = 0; r < opts.runs; ++r) {
    const auto res = clustering::kmeans(points, rep.num_classes, derive_seed(opts.seed, "eval", r), km);
    rep.nmi.push_back(metrics::nmi(res.assignments, persp.labels));
    rep.nmi_arithmetic.push_back(metrics::nmi(res.assignments, persp.labels, metrics::NmiNormalization::Arithmetic));
    rep.ri.push_back(metrics::rand_index(res.assignments, persp.labels));
    if (r == 0) rep.assignments = res.assignments;
  }
  std::tie(rep.nmi_mean, rep.nmi_std) = mean_std(rep.nmi);
  std::tie(rep.ri_mean, rep.ri_std) = mean_std(rep.ri);
  std::tie(rep.nmi_arithmetic_mean, rep.nmi_arithmetic_std) = mean_std(rep.nmi_arithmetic);
  return rep;
}

json EvalReport::to_json() const {
  return {{"perspective", perspective},
          {"M", num_classes},
          {"runs", runs},
          {"nmi", {{"mean", nmi_mean}, {"std", nmi_std}, {"values", nmi}}},
          {"ri", {{"mean", ri_mean}, {"std", ri_std}, {"values", ri}}},
          {"nmi_arithmetic", {{"mean", nmi_arithmetic_mean}, {"std", nmi_arithmetic_std}, {"values", nmi_arithmetic}}},
          {"assignments", assignments}};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_json(const json& doc, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, path.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const TrainResult& result, const fs::path& dir) {
  const auto& s = result.state;
  fs::create_directories(dir / "params");
  io::write_matrix(s.fused, dir / "fused.dpx");
  io::write_matrix(s.visual_out, dir / "visual_out.dpx");
  io::write_matrix(s.text_out, dir / "text_out.dpx");
  io::write_matrix(s.lambda, dir / "lambda.dpx");
  io::write_matrix(s.proxies, dir / "proxies.dpx");
  json index = json::array();
  for (const auto& p : s.params) {
    const std::string file = p.name + ".dpx";
    io::write_matrix(p.value, dir / "params" / file);
    index.push_back({{"name", p.name}, {"file", file}, {"rows", p.value.rows}, {"cols", p.value.cols}});
  }
  write_json(index, dir / "params" / "index.json");
  write_json(result.report.to_json(), dir / "report.json");
}

TrainedState load_checkpoint(const fs::path& dir) {
  TrainedState s;
  s.fused = io::read_raw_matrix(dir / "fused.dpx");
  s.visual_out = io::read_raw_matrix(dir / "visual_out.dpx");
  s.text_out = io::read_raw_matrix(dir / "text_out.dpx");
  s.lambda = io::read_raw_matrix(dir / "lambda.dpx");
  s.proxies = io::read_raw_matrix(dir / "proxies.dpx");
  for (const auto& entry : read_json(dir / "params" / "index.json")) {
    auto value = io::read_raw_matrix(dir / "params" / entry.at("file").get<std::string>());
    if (value.rows != entry.at("rows").get<std::size_t>() || value.cols != entry.at("cols").get<std::size_t>()) {
      throw Error(ErrorCode::SchemaError, "parameter shape differs from params/index.json");
    }
    s.params.add(entry.at("name").get<std::string>(), std::move(value));
  }
  return s;
}

}  // namespace dproxy::trainer
