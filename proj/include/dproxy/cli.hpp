#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "dproxy/trainer.hpp"

namespace CLI {
class App;
}

namespace dproxy::cli {

struct Options {
  std::filesystem::path spec, out, manifest, run;
  std::string concept_name, perspective, mode = "gpt", modality;
  trainer::TrainConfig train;
  std::uint64_t verify_seed = 1;
  bool validate = false;
  bool attention = false;
};

/// The full command tree bound to `opts`; exposed so tests can inspect flags.
std::unique_ptr<CLI::App> make_app(Options& opts);

/// Exit codes: 0 success, 1 validation error, 2 runtime failure. Failures
/// also print one JSON line {"error", "message", "exit"} to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace dproxy::cli
