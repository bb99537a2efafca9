#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dproxy/ioformats.hpp"

namespace dproxy::synth {

struct PerspectiveSpec {
  std::string name;
  int num_classes = 3;        // M
  int subspace = 4;           // dimensions reserved for this perspective's prototypes
};

struct SynthSpec {
  std::string name = "synthetic";
  std::size_t samples = 600;  // D
  std::size_t dim = 32;       // d
  std::vector<PerspectiveSpec> perspectives = {{"color", 3, 4}, {"shape", 3, 4}};
  double noise_sigma = 0.05;
  /// Distractors per concept; -1 means 3M, which with M class words gives
  /// the 4M = 2^2 M pool expected by E=200, R=100.
  int distractor_count = -1;
  double visual_text_gap = 0.2;  // radians
  bool hard_distractors = false;
  double hard_perturbation = 0.35;  // norm of the offset added to a prototype in hard mode
  std::uint64_t seed = 7;

  void validate() const;  // throws SpecInvalid
  int distractors_for(int num_classes) const { return distractor_count < 0 ? 3 * num_classes : distractor_count; }

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& doc);
};

/// The ground truth behind a generated bundle, for oracles.
struct SynthTruth {
  /// Per perspective: M x d class prototypes in visual space and text space.
  std::vector<Tensor2<double>> visual_prototypes;
  std::vector<Tensor2<double>> text_prototypes;
  /// Per perspective: orthonormal basis (subspace x d) of its subspace.
  std::vector<Tensor2<double>> subspace_bases;
};

struct Generated {
  io::DatasetBundle bundle;  // candidates and label-name embeddings attached per perspective
  SynthTruth truth;
};

Generated generate(const SynthSpec& spec);

/// generate() then io::write_bundle() into `dir`, plus spec.json.
Generated generate_to(const SynthSpec& spec, const std::filesystem::path& dir);

}  // namespace dproxy::synth
