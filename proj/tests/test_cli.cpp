#include <doctest.h>

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dproxy/cli.hpp"

using namespace dproxy;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json read(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "dproxy_test_cli";
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "spec.json") << json{{"D", 60}, {"d", 16}}.dump();
  }
  ~Workspace() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("synth, train, eval, inspect end to end") {
  Workspace ws;
  const auto data = ws.root / "data";
  const auto run = ws.root / "run";
  auto r = call({"synth", "--spec", (ws.root / "spec.json").string(), "--out", data.string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(data / "manifest.json"));

  r = call({"inspect", "--validate", "--manifest", (data / "manifest.json").string()});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).at("valid") == true);

  r = call({"train", "--manifest", (data / "manifest.json").string(), "--concept", "color", "--out", run.string(),
            "--epochs", "4", "--update-interval", "2", "--batch", "16", "--layers", "1", "--eval-runs", "2",
            "--restarts", "2"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto echo = read(run / "config.json");
  CHECK(echo.at("command") == "train");
  CHECK(echo.at("args").at("config").at("epochs") == 4);
  const auto report = read(run / "report.json");
  CHECK(report.at("epochs").size() == 4);
  CHECK(report.at("candidate_history").size() == 2);

  r = call({"eval", "--run", run.string(), "--perspective", "shape"});
  REQUIRE(r.code == 0);
  const auto ev = read(run / "eval_shape.json");
  for (const char* metric : {"nmi", "ri", "nmi_arithmetic"})
    for (const char* key : {"mean", "std", "values"}) CHECK(ev.at(metric).contains(key));
  CHECK(ev.at("nmi").at("values").size() == 2);
  CHECK(ev.at("assignments").size() == 60);

  r = call({"inspect", "--run", run.string(), "--attention"});
  REQUIRE(r.code == 0);
  for (const char* f : {"schedules.csv", "candidate_history.json", "fused_coords.csv", "lambda.csv",
                        "attention_l0_v.dpx", "attention_l0_t.dpx"})
    CHECK(fs::exists(run / "inspect" / f));

  r = call({"baseline", "--manifest", (data / "manifest.json").string(), "--concept", "color", "--mode", "label"});
  CHECK(r.code == 0);
  CHECK(r.out.find("NMI") != std::string::npos);
}

TEST_CASE("indivisible schedule exits 1") {
  Workspace ws;
  REQUIRE(call({"synth", "--spec", (ws.root / "spec.json").string(), "--out", (ws.root / "d").string()}).code == 0);
  const auto r = call({"train", "--manifest", (ws.root / "d" / "manifest.json").string(), "--concept", "color",
                       "--out", (ws.root / "r").string(), "--epochs", "1000", "--update-interval", "300"});
  CHECK(r.code == 1);
  const auto err = json::parse(r.err);
  CHECK(err.at("error") == "ConfigInvalid");
  CHECK(err.at("exit") == 1);
  CHECK(err.at("message").get<std::string>().find("E not divisible by R") != std::string::npos);
}

TEST_CASE("usage and data errors are one JSON line") {
  auto r = call({"train"});
  CHECK(r.code == 1);
  CHECK(json::parse(r.err).at("error") == "UsageError");
  r = call({});
  CHECK(r.code == 1);

  Workspace ws;
  std::ofstream(ws.root / "manifest.json") << "{broken";
  r = call({"inspect", "--validate", "--manifest", (ws.root / "manifest.json").string()});
  CHECK(r.code == 1);
  CHECK(json::parse(r.err).at("error") == "SchemaError");
  CHECK(r.err.find('\n') == r.err.size() - 1);
}

TEST_CASE("train flags mirror every config key") {
  cli::Options o;
  auto app = cli::make_app(o);
  auto* train = app->get_subcommand("train");
  const json keys = o.train.to_json();
  for (const auto& [key, value] : keys.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CHECK_NOTHROW(train->get_option(flag));
  }
  const auto help = call({"train", "--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("--tau-alpha") != std::string::npos);
}
