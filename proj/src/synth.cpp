#include "dproxy/synth.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "dproxy/rng.hpp"

namespace dproxy::synth {

using nlohmann::json;

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

void normalize(Vec& v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
}

Vec gaussian(Rng& rng, std::size_t d) {
  Vec v(d);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

// Orthonormalizes `count` Gaussian vectors against `against` and each other.
std::vector<Vec> orthonormal_set(Rng& rng, std::size_t d, std::size_t count, const std::vector<Vec>& against = {}) {
  std::vector<Vec> out;
  while (out.size() < count) {
    Vec v = gaussian(rng, d);
    for (const auto& a : against) {
      const double p = dot(v, a);
      for (std::size_t j = 0; j < d; ++j) v[j] -= p * a[j];
    }
    for (const auto& a : out) {
      const double p = dot(v, a);
      for (std::size_t j = 0; j < d; ++j) v[j] -= p * a[j];
    }
    const double n = std::sqrt(dot(v, v));
    if (n < 1e-8) continue;
    for (auto& x : v) x /= n;
    out.push_back(std::move(v));
  }
  return out;
}

// Unit vector orthogonal to `p`.
Vec orthogonal_direction(Rng& rng, const Vec& p) { return orthonormal_set(rng, p.size(), 1, {p}).front(); }

template <typename Index>
void shuffle(std::vector<Index>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

Tensor2<double> to_tensor(const std::vector<Vec>& rows, std::size_t d) {
  Tensor2<double> t(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  return t;
}

Tensor2<float> to_float_rows(const std::vector<Vec>& rows, std::size_t d) {
  Tensor2<float> t(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) t(i, j) = static_cast<float>(rows[i][j]);
  return t;
}

}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::SpecInvalid, why); };
  if (samples < 2) fail("need at least 2 samples");
  if (dim < 2) fail("dim must be at least 2");
  if (perspectives.empty()) fail("need at least one perspective");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be non-negative");
  if (!(visual_text_gap >= 0.0)) fail("visual_text_gap must be non-negative");
  std::size_t used = 0;
  for (const auto& p : perspectives) {
    if (p.name.empty()) fail("perspective names must be non-empty");
    if (p.num_classes < 2) fail("perspective \"" + p.name + "\" needs M >= 2");
    if (p.subspace < p.num_classes) fail("perspective \"" + p.name + "\" needs subspace >= M");
    if (static_cast<std::size_t>(p.num_classes) > samples) fail("more classes than samples in \"" + p.name + "\"");
    used += static_cast<std::size_t>(p.subspace);
  }
  if (used > dim) fail("sum of subspace sizes exceeds dim");
  if (distractor_count < -1) fail("distractor_count must be >= 0 (or -1 for 3M)");
}

json SynthSpec::to_json() const {
  json persp = json::array();
  for (const auto& p : perspectives) persp.push_back({{"name", p.name}, {"M", p.num_classes}, {"subspace", p.subspace}});
  return {{"name", name},
          {"D", samples},
          {"d", dim},
          {"perspectives", persp},
          {"noise_sigma", noise_sigma},
          {"distractor_count", distractor_count},
          {"visual_text_gap", visual_text_gap},
          {"hard_distractors", hard_distractors},
          {"hard_perturbation", hard_perturbation},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const json& doc) {
  SynthSpec s;
  try {
    s.name = doc.value("name", s.name);
    s.samples = doc.value("D", s.samples);
    s.dim = doc.value("d", s.dim);
    if (doc.contains("perspectives")) {
      s.perspectives.clear();
      for (const auto& p : doc.at("perspectives")) {
        PerspectiveSpec ps;
        ps.name = p.at("name").get<std::string>();
        ps.num_classes = p.value("M", ps.num_classes);
        ps.subspace = p.value("subspace", std::max(ps.num_classes, 4));
        s.perspectives.push_back(ps);
      }
    }
    s.noise_sigma = doc.value("noise_sigma", s.noise_sigma);
    s.distractor_count = doc.value("distractor_count", s.distractor_count);
    s.visual_text_gap = doc.value("visual_text_gap", s.visual_text_gap);
    s.hard_distractors = doc.value("hard_distractors", s.hard_distractors);
    s.hard_perturbation = doc.value("hard_perturbation", s.hard_perturbation);
    s.seed = doc.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SpecInvalid, std::string("malformed synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

Generated generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dim, n = spec.samples;
  Rng geo = make_rng(spec.seed, "synth-geometry");
  Generated g;
  g.bundle.name = spec.name;

  // Disjoint subspaces carved from one random orthonormal basis.
  const auto basis = orthonormal_set(geo, d, d);
  std::size_t offset = 0;
  std::vector<std::vector<Vec>> vis_protos, txt_protos;
  for (const auto& p : spec.perspectives) {
    const auto sub = static_cast<std::size_t>(p.subspace);
    std::vector<Vec> sub_basis(basis.begin() + static_cast<std::ptrdiff_t>(offset),
                               basis.begin() + static_cast<std::ptrdiff_t>(offset + sub));
    offset += sub;
    const auto coeffs = orthonormal_set(geo, sub, static_cast<std::size_t>(p.num_classes));
    std::vector<Vec> vis, txt;
    for (const auto& c : coeffs) {
      Vec proto(d, 0.0);
      for (std::size_t k = 0; k < sub; ++k)
        for (std::size_t j = 0; j < d; ++j) proto[j] += c[k] * sub_basis[k][j];
      normalize(proto);
      const Vec u = orthogonal_direction(geo, proto);
      Vec rotated(d);
      for (std::size_t j = 0; j < d; ++j)
        rotated[j] = std::cos(spec.visual_text_gap) * proto[j] + std::sin(spec.visual_text_gap) * u[j];
      vis.push_back(std::move(proto));
      txt.push_back(std::move(rotated));
    }
    g.truth.subspace_bases.push_back(to_tensor(sub_basis, d));
    g.truth.visual_prototypes.push_back(to_tensor(vis, d));
    g.truth.text_prototypes.push_back(to_tensor(txt, d));
    vis_protos.push_back(std::move(vis));
    txt_protos.push_back(std::move(txt));
  }

  // Balanced labels, shuffled independently per perspective.
  Rng lab = make_rng(spec.seed, "synth-labels");
  std::vector<std::vector<int>> labels;
  for (const auto& p : spec.perspectives) {
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) l[i] = static_cast<int>(i % static_cast<std::size_t>(p.num_classes));
    shuffle(l, lab);
    labels.push_back(std::move(l));
  }

  Rng noise = make_rng(spec.seed, "synth-noise");
  auto sample = [&](const std::vector<std::vector<Vec>>& protos, std::size_t i) {
    Vec v(d, 0.0);
    for (std::size_t p = 0; p < protos.size(); ++p) {
      const Vec& proto = protos[p][static_cast<std::size_t>(labels[p][i])];
      for (std::size_t j = 0; j < d; ++j) v[j] += proto[j];
    }
    for (auto& x : v) x += spec.noise_sigma * standard_normal(noise);
    normalize(v);
    return v;
  };
  std::vector<Vec> vis_rows, txt_rows;
  for (std::size_t i = 0; i < n; ++i) {
    vis_rows.push_back(sample(vis_protos, i));
    txt_rows.push_back(sample(txt_protos, i));
  }
  g.bundle.visual = to_float_rows(vis_rows, d);
  g.bundle.text = to_float_rows(txt_rows, d);

  Rng star = make_rng(spec.seed, "synth-star");
  g.bundle.star_embedding = to_float_rows(orthonormal_set(star, d, 1), d);

  Rng cand = make_rng(spec.seed, "synth-candidates");
  for (std::size_t p = 0; p < spec.perspectives.size(); ++p) {
    const auto& ps = spec.perspectives[p];
    io::Perspective out;
    out.concept_name = ps.name;
    out.num_classes = ps.num_classes;
    out.labels = labels[p];

    std::vector<std::string> words;
    std::vector<Vec> rows;
    for (int m = 0; m < ps.num_classes; ++m) {
      words.push_back(ps.name + "_" + std::to_string(m));
      rows.push_back(txt_protos[p][static_cast<std::size_t>(m)]);
    }
    const int nd = spec.distractors_for(ps.num_classes);
    for (int k = 0; k < nd; ++k) {
      words.push_back(ps.name + "_distractor_" + std::to_string(k));
      if (spec.hard_distractors) {
        const Vec& proto = txt_protos[p][static_cast<std::size_t>(k % ps.num_classes)];
        const Vec u = orthogonal_direction(cand, proto);
        Vec v(d);
        for (std::size_t j = 0; j < d; ++j) v[j] = proto[j] + spec.hard_perturbation * u[j];
        normalize(v);
        rows.push_back(std::move(v));
      } else {
        rows.push_back(orthonormal_set(cand, d, 1).front());
      }
    }
    std::vector<std::size_t> order(words.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, cand);
    io::CandidateFile cf;
    cf.concept_name = ps.name;
    std::vector<Vec> shuffled;
    for (auto k : order) {
      cf.words.push_back(words[k]);
      shuffled.push_back(rows[k]);
    }
    cf.embeddings = to_float_rows(shuffled, d);
    out.candidates = std::move(cf);
    out.label_embeddings = to_float_rows(txt_protos[p], d);
    g.bundle.perspectives.push_back(std::move(out));
  }
  io::validate_bundle(g.bundle);
  return g;
}

Generated generate_to(const SynthSpec& spec, const std::filesystem::path& dir) {
  Generated g = generate(spec);
  io::write_bundle(g.bundle, dir);
  std::ofstream out(dir / "spec.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "spec.json").string());
  out << spec.to_json().dump(2) << "\n";
  return g;
}

}  // namespace dproxy::synth
