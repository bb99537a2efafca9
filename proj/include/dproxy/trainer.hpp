#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dproxy/candidates.hpp"
#include "dproxy/diffmath.hpp"
#include "dproxy/fusion.hpp"
#include "dproxy/ioformats.hpp"

namespace dproxy::trainer {

enum class Modality { Both, Text, Visual };

std::string to_string(Modality m);
Modality parse_modality(const std::string& s);  // both|text|visual; throws ConfigInvalid
std::string to_string(fusion::FusionMode m);
fusion::FusionMode parse_fusion_mode(const std::string& s);  // gated|concat; throws ConfigInvalid

struct TrainConfig {
  int epochs = 200;           // E
  int update_interval = 100;  // R
  std::size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double tau_alpha = 0.2;
  double sigma = 0.2;
  std::size_t heads = 0;  // 0 picks fusion::default_heads(d)
  std::size_t layers = 2;
  std::uint64_t seed = 1;
  bool no_dynamic = false;
  bool no_uconstraints = false;
  bool no_cconstraints = false;
  fusion::FusionMode fusion = fusion::FusionMode::Gated;
  Modality modality = Modality::Both;
  std::size_t restarts = 10;   // K-means restarts per evaluation run
  std::size_t eval_runs = 10;

  /// Throws ConfigInvalid.
  void validate() const;
  /// Also checks the initial pool size against 2^(E/R) M when dynamic.
  void validate_pool(std::size_t pool_size, std::size_t num_classes) const;
  int halvings() const { return epochs / update_interval; }

  nlohmann::json to_json() const;
  /// Unknown keys are rejected so config echoes round-trip exactly.
  static TrainConfig from_json(const nlohmann::json& doc);
  std::uint64_t hash() const;
};

/// Weight of the candidate-anchoring term at epoch t of E.
double schedule_alpha(double t, double total_epochs);
/// Weight of the contrastive term at epoch t of E.
double schedule_beta(double t, double total_epochs);

struct TrainHooks {
  bool zero_loss_weights = false;
};

struct EpochRecord {
  int epoch = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double loss_align = 0.0;  // batch means averaged over the epoch
  double loss_user = 0.0;
  double loss_concept = 0.0;
  double total = 0.0;
  std::size_t active_candidates = 0;
};

struct CandidateEvent {
  int epoch = 0;
  std::string status;  // updated | pool_exhausted | degenerate_proxies
  std::size_t before = 0;
  std::size_t after = 0;
  std::vector<std::string> retained;
};

struct LambdaStats {
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
};

struct RunReport {
  std::string dataset;
  std::string concept_name;
  TrainConfig config;
  std::uint64_t config_hash = 0;
  std::vector<EpochRecord> epochs;
  std::vector<CandidateEvent> candidate_events;
  LambdaStats lambda;
  std::vector<std::string> final_candidates;
  std::optional<std::string> failure;

  nlohmann::json to_json() const;
};

struct TrainedState {
  diff::ParamStore<float> params;  // fusion parameters plus "proxy.base"
  candidates::CandidatePool pool;
  Tensor2<float> proxies;      // D x d, derived from the final active pool
  Tensor2<float> fused;        // D x d
  Tensor2<float> visual_out;   // V^L
  Tensor2<float> text_out;     // T^L
  Tensor2<float> lambda;       // D x 1

  const Tensor2<float>& features(Modality m) const;
};

struct TrainResult {
  TrainedState state;
  RunReport report;
};

/// Thrown when a loss goes non-finite; carries the report up to that point.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& message, RunReport partial, int epoch, std::size_t batch)
      : Error(ErrorCode::NonFiniteLoss, message), report_(std::move(partial)), epoch_(epoch), batch_(batch) {}
  const RunReport& report() const { return report_; }
  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  RunReport report_;
  int epoch_;
  std::size_t batch_;
};

inline const std::string kBaseProxyName = "proxy.base";

fusion::FusionConfig fusion_config(const TrainConfig& cfg, std::size_t dim);

/// Mini-batches of one epoch: a seeded permutation cut into chunks of `batch`,
/// with a trailing chunk smaller than 2 folded into the previous one.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed, int epoch);
/// Same chunking in index order, for the final forward pass.
std::vector<std::vector<std::size_t>> ordered_batches(std::size_t n, std::size_t batch);

struct LossWeights {
  double align = 1.0;
  double user = 0.0;
  double concept_term = 0.0;
};

LossWeights loss_weights(const TrainConfig& cfg, int epoch, const TrainHooks& hooks = {});

template <typename T>
struct BatchLoss {
  diff::Var<T> total, align, user, concept_term;
  fusion::FusionVars<T> fusion;
};

/// The full objective on one batch. `params` must hold the fusion parameters
/// and kBaseProxyName; `candidates` are the active candidate embeddings.
template <typename T>
BatchLoss<T> batch_loss(diff::Binder<T>& bind, const fusion::FusionConfig& fcfg, const Tensor2<T>& visual,
                        const Tensor2<T>& text, const std::vector<std::size_t>& idx, const Tensor2<T>& candidates,
                        const LossWeights& weights, T tau_alpha, T sigma);

/// Adam with beta1 0.9, beta2 0.999, eps 1e-8 and L2 weight decay added to
/// the gradient.
class Adam {
 public:
  Adam(double lr, double weight_decay) : lr_(lr), weight_decay_(weight_decay) {}
  void step(diff::ParamStore<float>& params);
  long steps() const { return t_; }

 private:
  double lr_, weight_decay_;
  long t_ = 0;
  std::unordered_map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments_;
};

/// Trains on one concept of `bundle` using the concept's candidate file.
TrainResult train(const io::DatasetBundle& bundle, const std::string& concept_name, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});
/// Same with an explicit pool.
TrainResult train(const io::DatasetBundle& bundle, const std::string& concept_name, candidates::CandidatePool pool,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

struct EvalOptions {
  std::size_t runs = 10;
  std::size_t restarts = 10;
  std::uint64_t seed = 1;
};

struct EvalReport {
  std::string perspective;
  std::size_t num_classes = 0;
  std::size_t runs = 0;
  std::vector<double> nmi, ri, nmi_arithmetic;
  double nmi_mean = 0.0, nmi_std = 0.0;
  double ri_mean = 0.0, ri_std = 0.0;
  double nmi_arithmetic_mean = 0.0, nmi_arithmetic_std = 0.0;
  std::vector<int> assignments;  // first run

  nlohmann::json to_json() const;
};

/// K-means with k = M on `features`, `runs` times with seeds derived from
/// opts.seed; mean and population std of NMI and RI against the labels.
EvalReport evaluate(const Tensor2<float>& features, const io::DatasetBundle& bundle, const std::string& perspective,
                    const EvalOptions& opts = {});
EvalOptions eval_options(const TrainConfig& cfg);

/// Run directory checkpoint: matrices as DPROXYV1 plus params/index.json.
void save_checkpoint(const TrainResult& result, const std::filesystem::path& dir);
TrainedState load_checkpoint(const std::filesystem::path& dir);

}  // namespace dproxy::trainer
