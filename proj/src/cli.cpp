#include "dproxy/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dproxy/log.hpp"
#include "dproxy/metrics.hpp"
#include "dproxy/proxy.hpp"
#include "dproxy/synth.hpp"
#include "dproxy/verify.hpp"

namespace dproxy::cli {

using nlohmann::json;
namespace fs = std::filesystem;

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

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

std::string fixed(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

void emit_error(std::ostream& err, const std::string& code, const std::string& message, int exit_code) {
  err << json{{"error", code}, {"message", message}, {"exit", exit_code}}.dump() << "\n";
}

// config.json: everything needed to re-run the command.
void write_echo(const fs::path& dir, const std::string& command, json args) {
  write_json({{"command", command}, {"args", std::move(args)}}, dir / "config.json");
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o, std::ostream& out) {
  synth::SynthSpec spec;
  if (!o.spec.empty()) spec = synth::SynthSpec::from_json(read_json(o.spec));
  ensure_dir(o.out);
  const auto g = synth::generate_to(spec, o.out);
  write_echo(o.out, "synth", {{"spec", spec.to_json()}});
  out << "wrote " << g.bundle.size() << " samples x " << g.bundle.dim() << " dims, " << g.bundle.perspectives.size()
      << " perspectives to " << o.out.string() << "\n";
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  o.train.validate();
  const auto manifest = fs::absolute(o.manifest).lexically_normal();
  const auto bundle = io::load_bundle(manifest);
  ensure_dir(o.out);
  write_echo(o.out, "train",
             {{"manifest", manifest.string()}, {"concept", o.concept_name}, {"config", o.train.to_json()}});
  const auto start = std::chrono::steady_clock::now();
  trainer::TrainResult result;
  try {
    result = trainer::train(bundle, o.concept_name, o.train);
  } catch (const trainer::TrainingAborted& e) {
    write_json(e.report().to_json(), o.out / "report.json");
    throw;
  }
  trainer::save_checkpoint(result, o.out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log::info("training took " + fixed(secs, 2) + " s");
  const auto& last = result.report.epochs.back();
  out << "trained " << o.train.epochs << " epochs on \"" << o.concept_name << "\": total loss "
      << fixed(result.report.epochs.front().total) << " -> " << fixed(last.total) << ", "
      << result.report.final_candidates.size() << " candidates active\n";
  return 0;
}

struct RunContext {
  json echo;
  trainer::TrainConfig config;
  io::DatasetBundle bundle;
  trainer::TrainedState state;
};

RunContext load_run(const fs::path& run) {
  RunContext ctx;
  ctx.echo = read_json(run / "config.json");
  if (ctx.echo.value("command", "") != "train") {
    throw Error(ErrorCode::SchemaError, (run / "config.json").string() + " does not describe a training run");
  }
  const auto& args = ctx.echo.at("args");
  ctx.config = trainer::TrainConfig::from_json(args.at("config"));
  ctx.bundle = io::load_bundle(args.at("manifest").get<std::string>());
  ctx.state = trainer::load_checkpoint(run);
  return ctx;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const auto ctx = load_run(o.run);
  const auto modality = o.modality.empty() ? ctx.config.modality : trainer::parse_modality(o.modality);
  auto rep = trainer::evaluate(ctx.state.features(modality), ctx.bundle, o.perspective, trainer::eval_options(ctx.config));
  json doc = rep.to_json();
  doc["modality"] = trainer::to_string(modality);
  doc["concept"] = ctx.echo.at("args").at("concept");
  doc["args"] = {{"run", fs::absolute(o.run).lexically_normal().string()},
                 {"perspective", o.perspective},
                 {"modality", trainer::to_string(modality)}};
  const fs::path dest = o.out.empty() ? o.run : o.out;
  ensure_dir(dest);
  write_json(doc, dest / ("eval_" + o.perspective + ".json"));
  out << "perspective  runs  NMI              RI\n";
  out << std::left << std::setw(13) << o.perspective << std::setw(6) << rep.runs << fixed(rep.nmi_mean) << " +- "
      << fixed(rep.nmi_std) << "  " << fixed(rep.ri_mean) << " +- " << fixed(rep.ri_std) << "\n";
  return 0;
}

int cmd_baseline(const Options& o, std::ostream& out) {
  const auto bundle = io::load_bundle(o.manifest);
  const auto& persp = bundle.perspective(o.concept_name);
  Tensor2<float> anchors;
  if (o.mode == "gpt") {
    if (!persp.candidates) throw Error(ErrorCode::SchemaError, "perspective has no candidate file");
    anchors = persp.candidates->embeddings;
  } else {
    if (!persp.label_embeddings) throw Error(ErrorCode::SchemaError, "perspective has no label-name embeddings");
    anchors = *persp.label_embeddings;
  }
  const auto assigned = metrics::zeroshot_assign(bundle.visual, anchors);
  const double nmi = metrics::nmi(assigned, persp.labels);
  const double ri = metrics::rand_index(assigned, persp.labels);
  const json doc = {{"concept", o.concept_name}, {"mode", o.mode}, {"nmi", nmi}, {"ri", ri}, {"assignments", assigned}};
  if (!o.out.empty()) {
    ensure_dir(o.out);
    write_echo(o.out, "baseline", {{"manifest", fs::absolute(o.manifest).lexically_normal().string()},
                                   {"concept", o.concept_name},
                                   {"mode", o.mode}});
    write_json(doc, o.out / ("baseline_" + o.concept_name + "_" + o.mode + ".json"));
  }
  out << "baseline " << o.mode << " on \"" << o.concept_name << "\": NMI " << fixed(nmi) << "  RI " << fixed(ri)
      << "\n";
  return 0;
}

int cmd_verify(const Options& o, std::ostream& out, std::ostream& err) {
  const auto results = verify::run_all(o.verify_seed);
  bool all = true;
  json doc = json::array();
  out << std::left << std::setw(16) << "suite" << std::setw(6) << "result" << std::setw(10) << "seconds"
      << "summary\n";
  for (const auto& r : results) {
    all = all && r.passed;
    out << std::left << std::setw(16) << r.name << std::setw(6) << (r.passed ? "PASS" : "FAIL") << std::setw(10)
        << fixed(r.seconds, 3) << r.summary << "\n";
    doc.push_back({{"suite", r.name}, {"passed", r.passed}, {"summary", r.summary}, {"details", r.details}});
  }
  if (!o.out.empty()) {
    ensure_dir(o.out);
    write_echo(o.out, "verify", {{"seed", o.verify_seed}});
    // seconds are left out so the file is reproducible
    write_json(doc, o.out / "verify.json");
  }
  if (!all) {
    emit_error(err, "VerificationFailed", "one or more suites failed", 2);
    return 2;
  }
  return 0;
}

int cmd_validate(const Options& o, std::ostream& out) {
  if (o.manifest.empty()) throw Error(ErrorCode::ConfigInvalid, "inspect --validate needs --manifest");
  const auto bundle = io::load_bundle(o.manifest);
  json persp = json::array();
  for (const auto& p : bundle.perspectives) {
    persp.push_back({{"concept", p.concept_name},
                     {"M", p.num_classes},
                     {"candidates", p.candidates ? p.candidates->words.size() : 0}});
  }
  out << json{{"valid", true},
              {"name", bundle.name},
              {"samples", bundle.size()},
              {"dim", bundle.dim()},
              {"renormalized_rows", bundle.renormalized_rows},
              {"perspectives", persp}}
             .dump()
      << "\n";
  return 0;
}

void write_csv_matrix(const Tensor2<float>& m, const fs::path& path, const std::string& prefix) {
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  csv << "id";
  for (std::size_t j = 0; j < m.cols; ++j) csv << "," << prefix << j;
  csv << "\n" << std::setprecision(9);
  for (std::size_t i = 0; i < m.rows; ++i) {
    csv << i;
    for (float x : m.row(i)) csv << "," << x;
    csv << "\n";
  }
}

int cmd_inspect(const Options& o, std::ostream& out) {
  if (o.validate) return cmd_validate(o, out);
  if (o.run.empty()) throw Error(ErrorCode::ConfigInvalid, "inspect needs --run (or --validate --manifest)");
  const json report = read_json(o.run / "report.json");
  const fs::path dest = o.out.empty() ? o.run / "inspect" : o.out;
  ensure_dir(dest);
  write_echo(dest, "inspect", {{"run", fs::absolute(o.run).lexically_normal().string()}, {"attention", o.attention}});

  std::ofstream sched(dest / "schedules.csv", std::ios::trunc);
  if (!sched) throw Error(ErrorCode::IoError, "cannot write schedules.csv");
  sched << "epoch,alpha,beta,loss_align,loss_user,loss_concept,total,active_candidates\n" << std::setprecision(17);
  for (const auto& e : report.at("epochs")) {
    sched << e.at("epoch").get<int>() << "," << e.at("alpha").get<double>() << "," << e.at("beta").get<double>() << ","
          << e.at("loss_align").get<double>() << "," << e.at("loss_user").get<double>() << ","
          << e.at("loss_concept").get<double>() << "," << e.at("total").get<double>() << ","
          << e.at("active_candidates").get<std::size_t>() << "\n";
  }
  sched.close();
  write_json(report.at("candidate_history"), dest / "candidate_history.json");

  const auto fused = io::read_raw_matrix(o.run / "fused.dpx");
  const auto lambda = io::read_raw_matrix(o.run / "lambda.dpx");
  write_csv_matrix(fused, dest / "fused_coords.csv", "f");
  write_csv_matrix(lambda, dest / "lambda.csv", "lambda");

  if (o.attention) {
    const auto ctx = load_run(o.run);
    const auto fcfg = trainer::fusion_config(ctx.config, ctx.bundle.dim());
    if (fcfg.mode == fusion::FusionMode::Concat) throw Error(ErrorCode::ConfigInvalid, "concat fusion has no attention");
    auto params = ctx.state.params;
    const auto batch = trainer::ordered_batches(ctx.bundle.size(), ctx.config.batch).front();
    const std::span<const std::size_t> rows(batch);
    const auto tokens =
        fusion::compose_text_tokens_values(gather_rows(ctx.bundle.text, rows), gather_rows(ctx.state.proxies, rows), params);
    const auto fo = fusion::fuse_values(gather_rows(ctx.bundle.visual, rows), tokens, params, fcfg);
    for (std::size_t l = 0; l < fo.layers.size(); ++l) {
      io::write_matrix(fo.layers[l].attn_v.cast<float>(), dest / ("attention_l" + std::to_string(l) + "_v.dpx"));
      io::write_matrix(fo.layers[l].attn_t.cast<float>(), dest / ("attention_l" + std::to_string(l) + "_t.dpx"));
    }
  }

  const json summary = {{"concept", report.at("concept")},
                        {"epochs", report.at("epochs").size()},
                        {"lambda", report.at("lambda")},
                        {"candidate_updates", report.at("candidate_history").size()},
                        {"final_candidates", report.at("final_candidates")},
                        {"output", dest.string()}};
  out << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

std::unique_ptr<CLI::App> make_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Multi-perspective clustering with learnable text proxies", "dproxy");
  app->require_subcommand(1);
  app->option_defaults()->always_capture_default();

  auto* s = app->add_subcommand("synth", "Generate a synthetic embedding bundle");
  s->add_option("--spec", o.spec, "Synthetic spec JSON (defaults used when omitted)")->check(CLI::ExistingFile);
  s->add_option("--out", o.out, "Output directory")->required();

  auto& c = o.train;
  auto* t = app->add_subcommand("train", "Train proxies and fusion for one concept");
  t->add_option("--manifest", o.manifest, "Bundle manifest.json")->required()->check(CLI::ExistingFile);
  t->add_option("--concept", o.concept_name, "User-interest concept (perspective name)")->required();
  t->add_option("--out", o.out, "Run directory")->required();
  t->add_option("--epochs", c.epochs, "Total epochs E");
  t->add_option("--update-interval", c.update_interval, "Candidate update interval R");
  t->add_option("--batch", c.batch, "Batch size");
  t->add_option("--lr", c.lr, "Adam learning rate");
  t->add_option("--weight-decay", c.weight_decay, "L2 weight decay");
  t->add_option("--tau-alpha", c.tau_alpha, "Candidate softmax temperature");
  t->add_option("--sigma", c.sigma, "Contrastive temperature");
  t->add_option("--heads", c.heads, "Attention heads (0 = 4, or 2 when d < 8)");
  t->add_option("--layers", c.layers, "Fusion layers");
  t->add_option("--seed", c.seed, "Run seed");
  t->add_flag("--no-dynamic", c.no_dynamic, "Disable candidate management");
  t->add_flag("--no-uconstraints", c.no_uconstraints, "Drop the candidate-anchoring loss");
  t->add_flag("--no-cconstraints", c.no_cconstraints, "Drop the contrastive loss");
  t->add_option_function<std::string>(
       "--fusion", [&c](const std::string& v) { c.fusion = trainer::parse_fusion_mode(v); }, "gated|concat")
      ->default_str(trainer::to_string(c.fusion))
      ->check(CLI::IsMember({"gated", "concat"}));
  t->add_option_function<std::string>(
       "--modality", [&c](const std::string& v) { c.modality = trainer::parse_modality(v); },
       "Features clustered at evaluation: both|text|visual")
      ->default_str(trainer::to_string(c.modality))
      ->check(CLI::IsMember({"both", "text", "visual"}));
  t->add_option("--restarts", c.restarts, "K-means restarts per evaluation run");
  t->add_option("--eval-runs", c.eval_runs, "Seeded K-means runs averaged at evaluation");

  auto* e = app->add_subcommand("eval", "Cluster a trained run and score one perspective");
  e->add_option("--run", o.run, "Run directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--perspective", o.perspective, "Perspective whose labels are scored")->required();
  e->add_option("--modality", o.modality, "Override the run's modality: both|text|visual")
      ->check(CLI::IsMember({"both", "text", "visual"}));
  e->add_option("--out", o.out, "Output directory (defaults to the run directory)");

  auto* b = app->add_subcommand("baseline", "Zero-shot assignment baseline");
  b->add_option("--manifest", o.manifest, "Bundle manifest.json")->required()->check(CLI::ExistingFile);
  b->add_option("--concept", o.concept_name, "Concept")->required();
  b->add_option("--mode", o.mode, "gpt: candidate pool, label: label-name embeddings")
      ->check(CLI::IsMember({"gpt", "label"}));
  b->add_option("--out", o.out, "Output directory");

  auto* v = app->add_subcommand("verify", "Run the self-check suites");
  v->add_option("--seed", o.verify_seed, "Seed for the randomized suites");
  v->add_option("--out", o.out, "Output directory for verify.json");

  auto* i = app->add_subcommand("inspect", "Dump run diagnostics, or validate a bundle");
  i->add_option("--run", o.run, "Run directory")->check(CLI::ExistingDirectory);
  i->add_flag("--validate", o.validate, "Validate the bundle named by --manifest");
  i->add_option("--manifest", o.manifest, "Bundle manifest.json")->check(CLI::ExistingFile);
  i->add_flag("--attention", o.attention, "Also dump first-batch attention maps as DPROXYV1");
  i->add_option("--out", o.out, "Output directory (defaults to <run>/inspect)");
  return app;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options opts;
  auto app = make_app(opts);
  std::vector<const char*> argv{"dproxy"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app->parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app->help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(err, "UsageError", e.what(), 1);
    return 1;
  } catch (const Error& e) {
    const int code = is_validation_error(e.code()) ? 1 : 2;
    emit_error(err, std::string(to_string(e.code())), e.detail(), code);
    return code;
  }

  try {
    if (app->got_subcommand("synth")) return cmd_synth(opts, out);
    if (app->got_subcommand("train")) return cmd_train(opts, out);
    if (app->got_subcommand("eval")) return cmd_eval(opts, out);
    if (app->got_subcommand("baseline")) return cmd_baseline(opts, out);
    if (app->got_subcommand("verify")) return cmd_verify(opts, out, err);
    if (app->got_subcommand("inspect")) return cmd_inspect(opts, out);
  } catch (const Error& e) {
    const int code = is_validation_error(e.code()) ? 1 : 2;
    emit_error(err, std::string(to_string(e.code())), e.detail(), code);
    return code;
  } catch (const std::exception& e) {
    emit_error(err, "InternalError", e.what(), 2);
    return 2;
  }
  return 1;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace dproxy::cli
