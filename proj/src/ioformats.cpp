#include "dproxy/ioformats.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dproxy/log.hpp"

namespace dproxy::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>((v >> s) & 0xFFu));
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::vector<unsigned char>& bytes, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

// Renormalizes rows that miss unit norm by more than the slack.
std::size_t normalize_rows(EmbeddingMatrix& m, const std::string& origin) {
  std::size_t fixed = 0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    double s = 0.0;
    for (float x : row) s += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(s);
    if (norm == 0.0) {
      throw Error(ErrorCode::ZeroNormRow, origin + ": row " + std::to_string(i) + " has zero norm");
    }
    if (std::abs(norm - 1.0) > kUnitNormSlack) {
      for (float& x : row) x = static_cast<float>(static_cast<double>(x) / norm);
      ++fixed;
    }
  }
  if (fixed > 0) {
    log::warn(origin + ": renormalized " + std::to_string(fixed) + " row(s) to unit norm");
  }
  return fixed;
}

template <typename Value>
const json& require_key(const json& obj, const char* key, const std::string& origin) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw Error(ErrorCode::SchemaError, origin + ": missing key \"" + key + "\"");
  }
  const json& v = obj.at(key);
  bool ok = false;
  if constexpr (std::is_same_v<Value, std::string>) ok = v.is_string();
  if constexpr (std::is_same_v<Value, int>) ok = v.is_number_integer();
  if constexpr (std::is_same_v<Value, json>) ok = v.is_array();
  if (!ok) throw Error(ErrorCode::SchemaError, origin + ": key \"" + key + "\" has the wrong type");
  return v;
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name) out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_');
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrices

std::vector<unsigned char> encode_matrix(const Tensor2<float>& matrix) {
  for (float x : matrix.data) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteValue, "refusing to write a non-finite value");
  }
  std::vector<unsigned char> out;
  out.reserve(kHeaderBytes + matrix.size() * 4);
  out.resize(sizeof(kMagic));
  std::memcpy(out.data(), kMagic, sizeof(kMagic));
  put_u32_le(out, static_cast<std::uint32_t>(matrix.rows));
  put_u32_le(out, static_cast<std::uint32_t>(matrix.cols));
  for (float x : matrix.data) put_u32_le(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

Tensor2<float> decode_matrix(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::BadMagic, origin + ": missing DPROXYV1 magic");
  }
  if (bytes.size() < kHeaderBytes) throw Error(ErrorCode::TruncatedFile, origin + ": header is incomplete");
  const std::uint32_t rows = read_u32_le(bytes.data() + 8);
  const std::uint32_t dim = read_u32_le(bytes.data() + 12);
  const std::uint64_t expected = kHeaderBytes + 4ULL * rows * dim;
  if (bytes.size() < expected) {
    throw Error(ErrorCode::TruncatedFile, origin + ": header declares " + std::to_string(rows) + "x" +
                                              std::to_string(dim) + " (" + std::to_string(expected) +
                                              " bytes) but file has " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw Error(ErrorCode::TrailingBytes, origin + ": " + std::to_string(bytes.size() - expected) +
                                              " unexpected trailing byte(s)");
  }
  Tensor2<float> m(rows, dim);
  const unsigned char* p = bytes.data() + kHeaderBytes;
  for (std::size_t k = 0; k < m.data.size(); ++k, p += 4) {
    const float x = std::bit_cast<float>(read_u32_le(p));
    if (!std::isfinite(x)) {
      throw Error(ErrorCode::NonFiniteValue, origin + ": non-finite value at row " + std::to_string(k / dim) +
                                                 ", column " + std::to_string(k % dim));
    }
    m.data[k] = x;
  }
  return m;
}

Tensor2<float> read_raw_matrix(const fs::path& path) { return decode_matrix(read_file(path), path.string()); }

LoadedMatrix load_matrix(const fs::path& path) {
  LoadedMatrix out;
  out.matrix = read_raw_matrix(path);
  if (out.matrix.rows < 1 || out.matrix.cols < 2) {
    throw Error(ErrorCode::SchemaError, path.string() + ": embedding matrices need rows >= 1 and dim >= 2");
  }
  out.renormalized_rows = normalize_rows(out.matrix, path.string());
  return out;
}

void write_matrix(const Tensor2<float>& matrix, const fs::path& path) { write_bytes(encode_matrix(matrix), path); }

// ---------------------------------------------------------------------------
// Labels and candidates

std::vector<int> load_labels(const fs::path& csv_path, std::size_t expected_rows) {
  std::istringstream in(read_text(csv_path));
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::SchemaError, csv_path.string() + ": empty labels file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,label") {
    throw Error(ErrorCode::SchemaError, csv_path.string() + ": header must be \"id,label\"");
  }
  std::vector<int> labels(expected_rows, -1);
  std::vector<bool> seen(expected_rows, false);
  std::size_t count = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    long long id = 0, label = 0;
    try {
      if (comma == std::string::npos) throw std::invalid_argument("no comma");
      std::size_t used = 0;
      id = std::stoll(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("id");
      const std::string rest = line.substr(comma + 1);
      label = std::stoll(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw Error(ErrorCode::SchemaError, csv_path.string() + ": malformed line " + std::to_string(lineno));
    }
    if (id < 0 || static_cast<std::size_t>(id) >= expected_rows) {
      throw Error(ErrorCode::DimensionMismatch,
                  csv_path.string() + ": id " + std::to_string(id) + " outside [0, " + std::to_string(expected_rows) + ")");
    }
    if (seen[static_cast<std::size_t>(id)]) {
      throw Error(ErrorCode::SchemaError, csv_path.string() + ": duplicate id " + std::to_string(id));
    }
    if (label < 0 || label > std::numeric_limits<int>::max()) {
      throw Error(ErrorCode::LabelOutOfRange, csv_path.string() + ": label " + std::to_string(label) + " is negative");
    }
    seen[static_cast<std::size_t>(id)] = true;
    labels[static_cast<std::size_t>(id)] = static_cast<int>(label);
    ++count;
  }
  if (count != expected_rows) {
    throw Error(ErrorCode::DimensionMismatch, csv_path.string() + ": " + std::to_string(count) +
                                                  " labels for " + std::to_string(expected_rows) + " samples");
  }
  return labels;
}

void write_labels(const std::vector<int>& labels, const fs::path& csv_path) {
  std::ostringstream out;
  out << "id,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << ',' << labels[i] << '\n';
  write_text(out.str(), csv_path);
}

void validate_candidates(const CandidateFile& c, std::size_t dim) {
  if (c.words.size() != c.embeddings.rows) {
    throw Error(ErrorCode::DimensionMismatch, "candidates for \"" + c.concept_name + "\": " +
                                                  std::to_string(c.words.size()) + " words but " +
                                                  std::to_string(c.embeddings.rows) + " embedding rows");
  }
  if (c.embeddings.cols != dim) {
    throw Error(ErrorCode::DimensionMismatch, "candidates for \"" + c.concept_name + "\" have dim " +
                                                  std::to_string(c.embeddings.cols) + ", expected " + std::to_string(dim));
  }
  std::set<std::string> distinct(c.words.begin(), c.words.end());
  if (distinct.size() != c.words.size()) {
    throw Error(ErrorCode::SchemaError, "candidates for \"" + c.concept_name + "\" contain duplicate words");
  }
}

CandidateFile load_candidates(const fs::path& json_path) {
  json doc;
  try {
    doc = json::parse(read_text(json_path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaError, json_path.string() + ": " + e.what());
  }
  const std::string origin = json_path.string();
  CandidateFile c;
  c.concept_name = require_key<std::string>(doc, "concept", origin).get<std::string>();
  for (const auto& w : require_key<json>(doc, "words", origin)) {
    if (!w.is_string()) throw Error(ErrorCode::SchemaError, origin + ": words must be strings");
    c.words.push_back(w.get<std::string>());
  }
  const auto emb = json_path.parent_path() / require_key<std::string>(doc, "embeddings", origin).get<std::string>();
  c.embeddings = load_matrix(emb).matrix;
  validate_candidates(c, c.embeddings.cols);
  return c;
}

void write_candidates(const CandidateFile& c, const fs::path& json_path) {
  fs::path dpx = json_path;
  dpx.replace_extension(".dpx");
  write_matrix(c.embeddings, dpx);
  json doc = {{"concept", c.concept_name}, {"words", c.words}, {"embeddings", dpx.filename().string()}};
  write_text(doc.dump(2) + "\n", json_path);
}

// ---------------------------------------------------------------------------
// Bundles

const Perspective& DatasetBundle::perspective(const std::string& concept_name) const {
  for (const auto& p : perspectives)
    if (p.concept_name == concept_name) return p;
  throw Error(ErrorCode::PerspectiveUnknown, "no perspective named \"" + concept_name + "\" in " + name);
}

void validate_bundle(const DatasetBundle& b) {
  if (b.visual.rows != b.text.rows) {
    throw Error(ErrorCode::DimensionMismatch, "visual has " + std::to_string(b.visual.rows) + " rows, text has " +
                                                  std::to_string(b.text.rows));
  }
  if (b.visual.cols != b.text.cols) {
    throw Error(ErrorCode::DimensionMismatch, "visual dim " + std::to_string(b.visual.cols) + " != text dim " +
                                                  std::to_string(b.text.cols));
  }
  if (b.star_embedding && (b.star_embedding->rows != 1 || b.star_embedding->cols != b.dim())) {
    throw Error(ErrorCode::DimensionMismatch, "star embedding must be 1 x " + std::to_string(b.dim()));
  }
  std::set<std::string> names;
  for (const auto& p : b.perspectives) {
    if (!names.insert(p.concept_name).second) {
      throw Error(ErrorCode::SchemaError, "duplicate perspective \"" + p.concept_name + "\"");
    }
    if (p.labels.size() != b.size()) {
      throw Error(ErrorCode::DimensionMismatch, "perspective \"" + p.concept_name + "\" has " +
                                                    std::to_string(p.labels.size()) + " labels for " +
                                                    std::to_string(b.size()) + " samples");
    }
    if (p.num_classes < 1) throw Error(ErrorCode::SchemaError, "perspective \"" + p.concept_name + "\" needs M >= 1");
    std::vector<std::size_t> counts(static_cast<std::size_t>(p.num_classes), 0);
    for (int l : p.labels) {
      if (l < 0 || l >= p.num_classes) {
        throw Error(ErrorCode::LabelOutOfRange, "perspective \"" + p.concept_name + "\": label " + std::to_string(l) +
                                                    " outside [0, " + std::to_string(p.num_classes) + ")");
      }
      ++counts[static_cast<std::size_t>(l)];
    }
    for (std::size_t m = 0; m < counts.size(); ++m) {
      if (counts[m] == 0) {
        throw Error(ErrorCode::EmptyClass, "perspective \"" + p.concept_name + "\": class " + std::to_string(m) + " is empty");
      }
    }
    if (p.candidates) validate_candidates(*p.candidates, b.dim());
    if (p.label_embeddings &&
        (p.label_embeddings->rows != static_cast<std::size_t>(p.num_classes) || p.label_embeddings->cols != b.dim())) {
      throw Error(ErrorCode::DimensionMismatch, "perspective \"" + p.concept_name + "\": label embeddings must be M x d");
    }
  }
}

DatasetBundle load_bundle(const fs::path& manifest_path) {
  const std::string origin = manifest_path.string();
  json doc;
  try {
    doc = json::parse(read_text(manifest_path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaError, origin + ": " + e.what());
  }
  const fs::path base = manifest_path.parent_path();
  DatasetBundle b;
  b.name = require_key<std::string>(doc, "name", origin).get<std::string>();
  auto vis = load_matrix(base / require_key<std::string>(doc, "visual", origin).get<std::string>());
  auto txt = load_matrix(base / require_key<std::string>(doc, "text", origin).get<std::string>());
  b.visual = std::move(vis.matrix);
  b.text = std::move(txt.matrix);
  b.renormalized_rows = vis.renormalized_rows + txt.renormalized_rows;
  if (doc.contains("star") && !doc.at("star").is_null()) {
    auto star = load_matrix(base / require_key<std::string>(doc, "star", origin).get<std::string>());
    b.renormalized_rows += star.renormalized_rows;
    b.star_embedding = std::move(star.matrix);
  } else {
    log::info(origin + ": no star embedding; proxies will be initialized from the seeded generator");
  }
  if (b.visual.rows != b.text.rows || b.visual.cols != b.text.cols) validate_bundle(b);

  for (const auto& pj : require_key<json>(doc, "perspectives", origin)) {
    Perspective p;
    p.concept_name = require_key<std::string>(pj, "concept", origin).get<std::string>();
    p.num_classes = require_key<int>(pj, "M", origin).get<int>();
    p.labels = load_labels(base / require_key<std::string>(pj, "labels", origin).get<std::string>(), b.size());
    if (pj.contains("candidates") && !pj.at("candidates").is_null()) {
      p.candidates = load_candidates(base / require_key<std::string>(pj, "candidates", origin).get<std::string>());
    }
    if (pj.contains("label_embeddings") && !pj.at("label_embeddings").is_null()) {
      p.label_embeddings =
          load_matrix(base / require_key<std::string>(pj, "label_embeddings", origin).get<std::string>()).matrix;
    }
    b.perspectives.push_back(std::move(p));
  }
  validate_bundle(b);
  return b;
}

void write_bundle(const DatasetBundle& b, const fs::path& dir) {
  validate_bundle(b);
  fs::create_directories(dir);
  write_matrix(b.visual, dir / "visual.dpx");
  write_matrix(b.text, dir / "text.dpx");
  json doc = {{"name", b.name}, {"visual", "visual.dpx"}, {"text", "text.dpx"}};
  if (b.star_embedding) {
    write_matrix(*b.star_embedding, dir / "star.dpx");
    doc["star"] = "star.dpx";
  }
  json persp = json::array();
  for (const auto& p : b.perspectives) {
    const std::string tag = sanitize(p.concept_name);
    json pj = {{"concept", p.concept_name}, {"labels", "labels_" + tag + ".csv"}, {"M", p.num_classes}};
    write_labels(p.labels, dir / ("labels_" + tag + ".csv"));
    if (p.candidates) {
      write_candidates(*p.candidates, dir / ("candidates_" + tag + ".json"));
      pj["candidates"] = "candidates_" + tag + ".json";
    }
    if (p.label_embeddings) {
      write_matrix(*p.label_embeddings, dir / ("label_names_" + tag + ".dpx"));
      pj["label_embeddings"] = "label_names_" + tag + ".dpx";
    }
    persp.push_back(std::move(pj));
  }
  doc["perspectives"] = std::move(persp);
  write_text(doc.dump(2) + "\n", dir / "manifest.json");
}

}  // namespace dproxy::io
