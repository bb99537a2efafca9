#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "dproxy/metrics.hpp"
#include "dproxy/proxy.hpp"
#include "dproxy/rng.hpp"
#include "dproxy/synth.hpp"
#include "dproxy/trainer.hpp"

using namespace dproxy;
using namespace dproxy::trainer;
namespace fs = std::filesystem;

namespace {

const synth::Generated& small_data() {
  static const synth::Generated g = [] {
    synth::SynthSpec s;
    s.samples = 48;
    s.dim = 16;
    return synth::generate(s);
  }();
  return g;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 4;
  c.update_interval = 2;
  c.batch = 16;
  c.layers = 1;
  c.eval_runs = 2;
  c.restarts = 2;
  return c;
}

}  // namespace

TEST_CASE("schedule endpoints and midpoints") {
  CHECK(schedule_alpha(0, 200) == doctest::Approx(0.1));
  CHECK(schedule_alpha(100, 200) == doctest::Approx(0.3));
  CHECK(schedule_alpha(200, 200) == doctest::Approx(0.5));
  CHECK(schedule_beta(0, 200) == 0.0);
  CHECK(schedule_beta(100, 200) == doctest::Approx(0.1));
  CHECK(schedule_beta(200, 200) == doctest::Approx(0.2));
  for (int t = 1; t <= 200; ++t) {
    CHECK(schedule_alpha(t, 200) >= schedule_alpha(t - 1, 200));
    CHECK(schedule_beta(t, 200) >= schedule_beta(t - 1, 200));
  }
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 1000;
  c.update_interval = 300;
  try {
    c.validate();
    FAIL("expected ConfigInvalid");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigInvalid);
    CHECK(std::string(e.what()).find("E not divisible by R") != std::string::npos);
  }
  c.no_dynamic = true;
  CHECK_NOTHROW(c.validate());

  TrainConfig d;
  CHECK_NOTHROW(d.validate_pool(12, 3));
  CHECK_THROWS_AS(d.validate_pool(11, 3), Error);
  d.batch = 1;
  CHECK_THROWS_AS(d.validate(), Error);
}

TEST_CASE("config json round trip rejects unknown keys") {
  TrainConfig c = quick_config();
  c.fusion = fusion::FusionMode::Concat;
  c.modality = Modality::Text;
  c.no_uconstraints = true;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  c.seed = 2;
  CHECK(back.hash() != c.hash());
  auto doc = c.to_json();
  doc["learning_rate"] = 0.1;
  CHECK_THROWS_AS(TrainConfig::from_json(doc), Error);
  CHECK(parse_modality("text_only") == Modality::Text);
  CHECK_THROWS_AS(parse_modality("audio"), Error);
  CHECK_THROWS_AS(parse_fusion_mode("sum"), Error);
}

TEST_CASE("epoch batches cover every index once") {
  const auto b = epoch_batches(33, 8, 5, 3);
  std::vector<std::size_t> all;
  for (const auto& x : b) {
    CHECK(x.size() >= 2);
    all.insert(all.end(), x.begin(), x.end());
  }
  CHECK(b.size() == 4);
  CHECK(b.back().size() == 9);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(33);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
  CHECK(epoch_batches(33, 8, 5, 3) == b);
  CHECK(epoch_batches(33, 8, 5, 4) != b);
  CHECK(ordered_batches(10, 4).back() == std::vector<std::size_t>{8, 9});
}

TEST_CASE("ablation flags zero the loss weights") {
  TrainConfig c;
  auto w = loss_weights(c, 100);
  CHECK(w.user == doctest::Approx(0.3));
  CHECK(w.concept_term == doctest::Approx(0.1));
  c.no_uconstraints = true;
  c.no_cconstraints = true;
  w = loss_weights(c, 100);
  CHECK(w.user == 0.0);
  CHECK(w.concept_term == 0.0);
  CHECK(w.align == 1.0);
  TrainHooks h;
  h.zero_loss_weights = true;
  w = loss_weights(TrainConfig{}, 100, h);
  CHECK(w.align == 0.0);
}

TEST_CASE("zero loss weights leave parameters unchanged") {
  const auto& g = small_data();
  TrainHooks h;
  h.zero_loss_weights = true;
  auto cfg = quick_config();
  cfg.weight_decay = 0.0;
  const auto r0 = train(g.bundle, "color", cfg, h);
  fusion::FusionConfig fcfg = fusion_config(cfg, g.bundle.dim());
  diff::ParamStore<float> init;
  fusion::register_params(init, fcfg, cfg.seed);
  for (const auto& p : init) CHECK(r0.state.params.at(p.name).value == p.value);
  CHECK(r0.state.params.at(kBaseProxyName).value == proxy::init_base(g.bundle, cfg.seed));
}

TEST_CASE("training lowers the loss and records halvings") {
  const auto& g = small_data();
  auto cfg = quick_config();
  cfg.lr = 1e-2;
  const auto r = train(g.bundle, "color", cfg);
  REQUIRE(r.report.epochs.size() == 4);
  CHECK(r.report.epochs.back().total < r.report.epochs.front().total);
  REQUIRE(r.report.candidate_events.size() == 2);
  CHECK(r.report.candidate_events[0].before == 12);
  CHECK(r.report.candidate_events[0].after == 6);
  CHECK(r.report.candidate_events[1].after == 3);
  CHECK(r.report.final_candidates.size() == 3);
  CHECK(r.state.fused.rows == 48);
  CHECK(r.report.lambda.min >= 0.0);
  CHECK(r.report.lambda.max <= 1.0);
  for (const auto& e : r.report.epochs) CHECK(std::isfinite(e.total));
}

TEST_CASE("identical runs are bitwise identical") {
  const auto& g = small_data();
  const auto a = train(g.bundle, "shape", quick_config());
  const auto b = train(g.bundle, "shape", quick_config());
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.state.fused == b.state.fused);
}

TEST_CASE("no_dynamic with M candidates keeps an empty history") {
  const auto& g = small_data();
  const auto& p = g.bundle.perspective("color");
  io::CandidateFile just_classes{"color", {}, Tensor2<float>(3, g.bundle.dim())};
  for (int m = 0; m < 3; ++m) {
    just_classes.words.push_back("class" + std::to_string(m));
    for (std::size_t j = 0; j < g.bundle.dim(); ++j) just_classes.embeddings(m, j) = (*p.label_embeddings)(m, j);
  }
  auto cfg = quick_config();
  cfg.no_dynamic = true;
  const auto r = train(g.bundle, "color", candidates::CandidatePool::from_file(just_classes), cfg);
  CHECK(r.report.candidate_events.empty());
  CHECK(r.state.pool.history.empty());
  CHECK(r.report.final_candidates.size() == 3);
}

TEST_CASE("variants train") {
  const auto& g = small_data();
  auto cfg = quick_config();
  cfg.fusion = fusion::FusionMode::Concat;
  const auto r = train(g.bundle, "color", cfg);
  CHECK(r.report.lambda.mean == 0.5);
  cfg = quick_config();
  cfg.no_uconstraints = cfg.no_cconstraints = true;
  const auto ra = train(g.bundle, "color", cfg);
  CHECK(ra.report.epochs.back().loss_user > 0.0);
  CHECK(ra.report.epochs.back().total == doctest::Approx(ra.report.epochs.back().loss_align));
}

TEST_CASE("full objective gradient in double precision") {
  const auto& g = small_data();
  const auto cfg = quick_config();
  const auto fcfg = fusion_config(cfg, g.bundle.dim());
  diff::ParamStore<double> params;
  fusion::register_params(params, fcfg, 3);
  Tensor2<double> base(g.bundle.size(), g.bundle.dim());
  Rng rng = make_rng(4, "test-trainer");
  for (auto& x : base.data) x = standard_normal(rng);
  params.add(kBaseProxyName, base);
  const auto vis = g.bundle.visual.cast<double>();
  const auto txt = g.bundle.text.cast<double>();
  const auto cands = g.bundle.perspective("color").candidates->embeddings.cast<double>();
  const std::vector<std::size_t> idx = {3, 7, 11, 20};
  const auto rep = diff::grad_check(
      [&](diff::Tape<double>& tape, diff::ParamStore<double>& s) {
        diff::Binder<double> bind(tape, s);
        return batch_loss(bind, fcfg, vis, txt, idx, cands, LossWeights{1.0, 0.3, 0.1}, 0.2, 0.3).total;
      },
      params, 1e-5, 1e-4);
  INFO("worst " << rep.worst_param << " rel " << rep.max_rel_error);
  CHECK(rep.passed);
}

TEST_CASE("evaluation of perfect and shuffled features") {
  synth::SynthSpec s;
  s.samples = 300;
  s.dim = 16;
  const auto g = synth::generate(s);
  const auto& p = g.bundle.perspective("color");
  Tensor2<float> onehot(300, 3);
  for (std::size_t i = 0; i < 300; ++i) onehot(i, static_cast<std::size_t>(p.labels[i])) = 1.0f;
  EvalOptions opts;
  opts.runs = 3;
  opts.restarts = 3;
  const auto good = evaluate(onehot, g.bundle, "color", opts);
  CHECK(good.nmi_mean == doctest::Approx(1.0));
  CHECK(good.ri_mean == doctest::Approx(1.0));
  CHECK(good.nmi_std == doctest::Approx(0.0));
  CHECK(good.nmi.size() == 3);

  auto shuffled = g.bundle;
  Rng rng = make_rng(9, "test-trainer");
  auto& labels = shuffled.perspectives[0].labels;
  for (std::size_t i = labels.size() - 1; i > 0; --i) std::swap(labels[i], labels[uniform_index(rng, i + 1)]);
  const auto null = evaluate(onehot, shuffled, "color", opts);
  CHECK(null.nmi_mean < 0.1);
}

TEST_CASE("checkpoint round trip") {
  const auto& g = small_data();
  const auto r = train(g.bundle, "color", quick_config());
  const auto dir = fs::temp_directory_path() / "dproxy_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(r, dir);
  CHECK(fs::exists(dir / "report.json"));
  const auto back = load_checkpoint(dir);
  CHECK(back.fused == r.state.fused);
  CHECK(back.lambda == r.state.lambda);
  CHECK(back.proxies == r.state.proxies);
  for (const auto& p : r.state.params) CHECK(back.params.at(p.name).value == p.value);
  fs::remove_all(dir);
}
