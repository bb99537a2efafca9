#pragma once

// Self-checks behind the `verify` command.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dproxy/diffmath.hpp"
#include "dproxy/fusion.hpp"
#include "dproxy/trainer.hpp"

namespace dproxy::verify {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string summary;
  double seconds = 0.0;
  nlohmann::json details;
};

/// A small complete objective (fusion, proxies, all three loss terms) in
/// double precision, for finite-difference checks.
struct GradCheckProblem {
  fusion::FusionConfig fusion;
  diff::ParamStore<double> params;  // fusion parameters plus trainer::kBaseProxyName
  Tensor2<double> visual, text, candidates;
  std::vector<std::size_t> batch;
  trainer::LossWeights weights;
  double tau_alpha = 0.0, sigma = 0.0;

  diff::LossBuilder builder();
};

/// d=8, B=4, one layer, two heads, three candidates.
GradCheckProblem make_gradcheck_problem(std::uint64_t seed);

SuiteResult gradient_suite(std::uint64_t seed = 1);
SuiteResult drift_suite(std::uint64_t seed = 1, std::size_t trials = 100);
SuiteResult halving_suite(std::uint64_t seed = 1);
SuiteResult kmeans_oracle_suite(std::uint64_t seed = 1, std::size_t instances = 50);
SuiteResult metrics_suite(std::uint64_t seed = 1, std::size_t cases = 200);
SuiteResult schedule_suite();

std::vector<SuiteResult> run_all(std::uint64_t seed = 1);

}  // namespace dproxy::verify
