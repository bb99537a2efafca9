#include "dproxy/verify.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dproxy/candidates.hpp"
#include "dproxy/clustering.hpp"
#include "dproxy/metrics.hpp"
#include "dproxy/oracles.hpp"
#include "dproxy/proxy.hpp"
#include "dproxy/rng.hpp"

namespace dproxy::verify {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Tensor2<double> unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Tensor2<double> t(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (auto& x : t.row(i)) {
      x = standard_normal(rng);
      s += x * x;
    }
    for (auto& x : t.row(i)) x /= std::sqrt(s);
  }
  return t;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(3);
  os << x;
  return os.str();
}

}  // namespace

diff::LossBuilder GradCheckProblem::builder() {
  return [this](diff::Tape<double>& tape, diff::ParamStore<double>& store) {
    diff::Binder<double> bind(tape, store);
    return trainer::batch_loss(bind, fusion, visual, text, batch, candidates, weights, tau_alpha, sigma).total;
  };
}

GradCheckProblem make_gradcheck_problem(std::uint64_t seed) {
  constexpr std::size_t d = 8, b = 4, k = 3;
  GradCheckProblem p;
  p.fusion.dim = d;
  p.fusion.heads = 2;
  p.fusion.layers = 1;
  fusion::register_params(p.params, p.fusion, seed);
  Rng rng = make_rng(seed, "gradcheck-data");
  p.visual = unit_rows(rng, b, d);
  p.text = unit_rows(rng, b, d);
  p.candidates = unit_rows(rng, k, d);
  // Distinct base rows so every proxy sees a different softmax.
  p.params.add(trainer::kBaseProxyName, unit_rows(rng, b, d));
  p.batch.resize(b);
  std::iota(p.batch.begin(), p.batch.end(), 0);
  const trainer::TrainConfig defaults;
  p.tau_alpha = defaults.tau_alpha;
  p.sigma = defaults.sigma;
  p.weights = {1.0, trainer::schedule_alpha(100, 200), trainer::schedule_beta(100, 200)};
  // Move the gates and the temperature off their symmetric starting values.
  for (auto& param : p.params) {
    if (param.name == trainer::kBaseProxyName) continue;
    for (auto& x : param.value.data) x += 0.05 * standard_normal(rng);
  }
  return p;
}

SuiteResult gradient_suite(std::uint64_t seed) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "gradient";
  GradCheckProblem p = make_gradcheck_problem(seed);
  const auto report = diff::grad_check(p.builder(), p.params, 1e-5, 1e-4);
  r.passed = report.passed;
  r.summary = "max rel error " + fmt(report.max_rel_error) + " over " + std::to_string(report.entries_checked) +
              " entries (worst " + report.worst_param + "[" + std::to_string(report.worst_index) + "])";
  r.details = {{"max_rel_error", report.max_rel_error},
               {"entries", report.entries_checked},
               {"worst_param", report.worst_param},
               {"worst_index", report.worst_index},
               {"worst_analytic", report.worst_analytic},
               {"worst_numeric", report.worst_numeric}};
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult drift_suite(std::uint64_t seed, std::size_t trials) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "drift";
  Rng rng = make_rng(seed, "verify-drift");
  std::size_t violations = 0;
  double worst_slack = std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t kc = 2 + uniform_index(rng, 11), d = 2 + uniform_index(rng, 15), n = 1 + uniform_index(rng, 8);
    Tensor2<double> logits(n, kc);
    for (auto& x : logits.data) x = 2.0 * standard_normal(rng);
    Tensor2<double> alpha(n, kc);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity(), s = 0.0;
      for (double x : logits.row(i)) mx = std::max(mx, x);
      for (std::size_t k = 0; k < kc; ++k) s += (alpha(i, k) = std::exp(logits(i, k) - mx));
      for (std::size_t k = 0; k < kc; ++k) alpha(i, k) /= s;
    }
    const Tensor2<double> before = unit_rows(rng, kc, d);
    Tensor2<double> after = before;
    const double scale = std::pow(10.0, -3.0 + 4.0 * uniform01(rng));
    for (auto& x : after.data) x += scale * standard_normal(rng);
    const auto drift = proxy::frozen_alpha_drift(alpha, before, after);
    const double slack = drift.bound + 1e-9 - drift.max_drift;
    worst_slack = std::min(worst_slack, slack);
    if (slack < 0.0) ++violations;
  }
  r.passed = violations == 0;
  r.summary = std::to_string(trials) + " trials, " + std::to_string(violations) + " violations";
  r.details = {{"trials", trials}, {"violations", violations}, {"min_slack", worst_slack}};
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult halving_suite(std::uint64_t seed) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "halving";
  r.passed = true;
  r.details = json::array();
  std::ostringstream summary;
  for (auto [beta, m] : {std::pair{1, 3}, std::pair{2, 4}, std::pair{3, 2}}) {
    constexpr std::size_t d = 8, n = 24;
    Rng rng = make_rng(seed, "verify-halving", static_cast<std::uint64_t>(beta * 10 + m));
    const std::size_t pool_size = (std::size_t{1} << beta) * static_cast<std::size_t>(m);
    io::CandidateFile file;
    file.concept_name = "concept";
    file.embeddings = unit_rows(rng, pool_size, d).cast<float>();
    for (std::size_t i = 0; i < pool_size; ++i) file.words.push_back("w" + std::to_string(i));
    auto pool = candidates::CandidatePool::from_file(file);
    const Tensor2<double> proxies = unit_rows(rng, n, d);
    std::vector<std::size_t> counts{pool.active_count()};
    bool floor_ok = true;
    for (int e = 1; e <= beta; ++e) {
      candidates::update_pool(pool, proxies, static_cast<std::size_t>(m), e, seed);
      counts.push_back(pool.active_count());
      floor_ok = floor_ok && pool.active_count() >= static_cast<std::size_t>(m);
    }
    bool halved = true;
    for (std::size_t i = 1; i < counts.size(); ++i) halved = halved && counts[i] * 2 == counts[i - 1];
    const bool ok = floor_ok && halved && counts.back() == static_cast<std::size_t>(m);
    r.passed = r.passed && ok;
    r.details.push_back({{"beta_c", beta}, {"M", m}, {"counts", counts}, {"passed", ok}});
    summary << "(" << beta << "," << m << "):";
    for (std::size_t i = 0; i < counts.size(); ++i) summary << (i ? "->" : "") << counts[i];
    summary << " ";
  }
  r.summary = summary.str();
  r.summary.pop_back();
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult kmeans_oracle_suite(std::uint64_t seed, std::size_t instances) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "kmeans_oracle";
  Rng rng = make_rng(seed, "verify-kmeans");
  std::size_t failures = 0;
  double worst = 0.0;
  clustering::KMeansOptions opt;
  opt.restarts = 10;
  r.details = json::array();
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const std::size_t k = 2 + uniform_index(rng, 2);
    const std::size_t n = k + 1 + uniform_index(rng, 8 - k);
    const std::size_t d = 1 + uniform_index(rng, 3);
    Tensor2<double> pts(n, d);
    for (auto& x : pts.data) x = uniform01(rng) * 10.0 - 5.0;
    const auto km = clustering::kmeans(pts, k, derive_seed(seed, "verify-kmeans-run", inst), opt);
    const auto best = oracles::brute_force_kmeans(pts, k);
    const double gap = km.inertia - best.inertia;
    worst = std::max(worst, std::abs(gap));
    if (std::abs(gap) > 1e-9) {
      ++failures;
      r.details.push_back({{"instance", inst}, {"n", n}, {"k", k}, {"kmeans", km.inertia}, {"optimal", best.inertia}});
    }
  }
  r.passed = failures == 0;
  r.summary = std::to_string(instances) + " instances, " + std::to_string(failures) + " above 1e-9 (max gap " +
              fmt(worst) + ")";
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult metrics_suite(std::uint64_t seed, std::size_t cases) {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "metrics";
  Rng rng = make_rng(seed, "verify-metrics");
  std::size_t ri_mismatch = 0, nmi_relabel_fail = 0;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 2 + uniform_index(rng, 49);
    const std::size_t ka = 1 + uniform_index(rng, 6), kb = 1 + uniform_index(rng, 6);
    std::vector<int> a(n), b(n);
    for (auto& x : a) x = static_cast<int>(uniform_index(rng, ka));
    for (auto& x : b) x = static_cast<int>(uniform_index(rng, kb));
    if (metrics::rand_index(a, b) != oracles::pairwise_rand_index(a, b)) ++ri_mismatch;

    // Identical partitions under a random relabeling.
    std::vector<int> perm(ka);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = ka; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    std::vector<int> relabeled(n);
    for (std::size_t i = 0; i < n; ++i) relabeled[i] = perm[static_cast<std::size_t>(a[i])] + 3;
    if (std::abs(metrics::nmi(relabeled, a) - 1.0) > 1e-12) ++nmi_relabel_fail;
  }
  const std::vector<int> u{0, 0, 1, 1}, v{0, 1, 0, 1};
  const double independent = metrics::nmi(u, v);
  r.passed = ri_mismatch == 0 && nmi_relabel_fail == 0 && independent == 0.0;
  r.summary = std::to_string(cases) + " cases, " + std::to_string(ri_mismatch) + " RI mismatches, " +
              std::to_string(nmi_relabel_fail) + " relabel failures, independent NMI " + fmt(independent);
  r.details = {{"cases", cases},
               {"rand_index_mismatches", ri_mismatch},
               {"nmi_relabel_failures", nmi_relabel_fail},
               {"nmi_independent", independent}};
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult schedule_suite() {
  const auto start = Clock::now();
  SuiteResult r;
  r.name = "schedules";
  const double h = std::sqrt(2.0) / 2.0;
  const double alpha_expected[] = {0.1, 0.2, 0.3, 0.4, 0.5};
  const double beta_expected[] = {0.0, 0.1 * (1.0 - h), 0.1, 0.1 * (1.0 + h), 0.2};
  double worst = 0.0;
  bool endpoints = true;
  for (double e : {200.0, 1000.0}) {
    for (int q = 0; q <= 4; ++q) {
      const double t = e * q / 4.0;
      worst = std::max(worst, std::abs(trainer::schedule_alpha(t, e) - alpha_expected[q]));
      worst = std::max(worst, std::abs(trainer::schedule_beta(t, e) - beta_expected[q]));
    }
    endpoints = endpoints && trainer::schedule_alpha(0, e) == 0.1 && trainer::schedule_alpha(e, e) == 0.5 &&
                trainer::schedule_beta(0, e) == 0.0 && trainer::schedule_beta(e, e) == 0.2;
  }
  r.passed = worst <= 1e-12 && endpoints;
  r.summary = "max deviation " + fmt(worst) + (endpoints ? ", endpoints exact" : ", endpoints NOT exact");
  r.details = {{"max_deviation", worst}, {"endpoints_exact", endpoints}};
  r.seconds = seconds_since(start);
  return r;
}

std::vector<SuiteResult> run_all(std::uint64_t seed) {
  return {gradient_suite(seed), drift_suite(seed),   halving_suite(seed),
          kmeans_oracle_suite(seed), metrics_suite(seed), schedule_suite()};
}

}  // namespace dproxy::verify
