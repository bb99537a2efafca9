#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "dproxy/ioformats.hpp"
#include "dproxy/rng.hpp"

using namespace dproxy;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dproxy_test_io_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Hand-assembled file bytes, independent of encode_matrix.
std::vector<unsigned char> raw_file(std::uint32_t rows, std::uint32_t dim, const std::vector<float>& values) {
  std::vector<unsigned char> out = {'D', 'P', 'R', 'O', 'X', 'Y', 'V', '1'};
  for (std::uint32_t v : {rows, dim})
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
  for (float f : values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(bits >> s));
  }
  return out;
}

void put(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::IoError;
}

io::EmbeddingMatrix random_unit(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "test-io");
  io::EmbeddingMatrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    std::vector<double> v(c);
    for (auto& x : v) {
      x = standard_normal(rng);
      s += x * x;
    }
    for (std::size_t j = 0; j < c; ++j) m(i, j) = static_cast<float>(v[j] / std::sqrt(s));
  }
  return m;
}

// D=6, d=4, one perspective M=2.
void write_fixture(const fs::path& dir, const std::string& labels_csv, std::size_t text_rows = 6) {
  std::vector<float> vis, txt;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) vis.push_back(j == i % 4 ? 1.0f : 0.0f);
  for (std::size_t i = 0; i < text_rows; ++i)
    for (std::size_t j = 0; j < 4; ++j) txt.push_back(j == (i + 1) % 4 ? 1.0f : 0.0f);
  put(dir / "visual.dpx", raw_file(6, 4, vis));
  put(dir / "text.dpx", raw_file(static_cast<std::uint32_t>(text_rows), 4, txt));
  put_text(dir / "labels.csv", labels_csv);
  nlohmann::json manifest = {{"name", "fixture"},
                             {"visual", "visual.dpx"},
                             {"text", "text.dpx"},
                             {"perspectives", {{{"concept", "color"}, {"labels", "labels.csv"}, {"M", 2}}}}};
  put_text(dir / "manifest.json", manifest.dump());
}

const std::string kGoodLabels = "id,label\n0,0\n1,0\n2,0\n3,1\n4,1\n5,1\n";

}  // namespace

TEST_CASE("axis vector is normalized on load") {
  TempDir dir("axis");
  put(dir.path / "m.dpx", raw_file(1, 4, {2, 0, 0, 0}));
  const auto loaded = io::load_matrix(dir.path / "m.dpx");
  CHECK(loaded.matrix == Tensor2<float>::from(1, 4, {1, 0, 0, 0}));
  CHECK(loaded.renormalized_rows == 1);
}

TEST_CASE("unit rows load unchanged") {
  TempDir dir("identity");
  put(dir.path / "m.dpx", raw_file(2, 2, {1, 0, 0, 1}));
  const auto loaded = io::load_matrix(dir.path / "m.dpx");
  CHECK(loaded.matrix == Tensor2<float>::from(2, 2, {1, 0, 0, 1}));
  CHECK(loaded.renormalized_rows == 0);
}

TEST_CASE("loader reports the specific error for each malformed file") {
  TempDir dir("malformed");
  const auto p = dir.path / "m.dpx";
  const std::size_t dim = 3;

  auto truncated = raw_file(3, dim, std::vector<float>(2 * dim, 0.5f));
  REQUIRE(truncated.size() == 8 + 4 + 4 + 2 * dim * 4);
  put(p, truncated);
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::TruncatedFile);

  auto bad = raw_file(1, 2, {1, 0});
  bad[0] = 'X';
  put(p, bad);
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::BadMagic);

  put(p, {'D', 'P', 'R', 'O', 'X', 'Y', 'V', '1', 1, 0});
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::TruncatedFile);

  auto extra = raw_file(1, 2, {1, 0});
  extra.push_back(0);
  put(p, extra);
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::TrailingBytes);

  put(p, raw_file(1, 2, {std::nanf(""), 1}));
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::NonFiniteValue);

  put(p, raw_file(2, 2, {1, 0, 0, 0}));
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::ZeroNormRow);

  put(p, raw_file(2, 1, {1, 1}));
  CHECK(code_of([&] { io::load_matrix(p); }) == ErrorCode::SchemaError);

  CHECK(code_of([&] { io::load_matrix(dir.path / "missing.dpx"); }) == ErrorCode::IoError);
}

TEST_CASE("write_matrix produces the exact byte layout") {
  TempDir dir("write");
  const auto p = dir.path / "eye.dpx";
  io::write_matrix(Tensor2<float>::from(2, 2, {1, 0, 0, 1}), p);
  CHECK(fs::file_size(p) == 8 + 4 + 4 + 16);
  CHECK(slurp(p) == raw_file(2, 2, {1, 0, 0, 1}));
}

TEST_CASE("round trip is bit-exact and corruption is visible") {
  TempDir dir("roundtrip");
  const auto p = dir.path / "r.dpx";
  const auto m = random_unit(17, 9, 3);
  io::write_matrix(m, p);
  const auto back = io::load_matrix(p).matrix;
  REQUIRE(back.data.size() == m.data.size());
  CHECK(std::memcmp(back.data.data(), m.data.data(), m.data.size() * sizeof(float)) == 0);

  auto bytes = slurp(p);
  bytes[io::kHeaderBytes + 5] ^= 0x01;
  put(p, bytes);
  const auto corrupt = io::read_raw_matrix(p);
  CHECK(std::memcmp(corrupt.data.data(), m.data.data(), m.data.size() * sizeof(float)) != 0);
}

TEST_CASE("hand-built bundle loads and keeps perspective order") {
  TempDir dir("bundle");
  write_fixture(dir.path, kGoodLabels);
  const auto b = io::load_bundle(dir.path / "manifest.json");
  CHECK(b.name == "fixture");
  CHECK(b.size() == 6);
  CHECK(b.dim() == 4);
  CHECK_FALSE(b.star_embedding.has_value());
  REQUIRE(b.perspectives.size() == 1);
  CHECK(b.perspectives[0].labels == std::vector<int>{0, 0, 0, 1, 1, 1});
  CHECK(b.perspective("color").num_classes == 2);
  CHECK(code_of([&] { b.perspective("shape"); }) == ErrorCode::PerspectiveUnknown);
}

TEST_CASE("bundle validation errors") {
  TempDir dir("bundle_bad");
  const auto manifest = dir.path / "manifest.json";

  write_fixture(dir.path, "id,label\n0,0\n1,0\n2,0\n3,1\n4,1\n5,2\n");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::LabelOutOfRange);

  write_fixture(dir.path, kGoodLabels, 5);
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::DimensionMismatch);

  write_fixture(dir.path, "id,label\n0,0\n1,0\n2,0\n3,0\n4,0\n5,0\n");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::EmptyClass);

  write_fixture(dir.path, "id,label\n0,0\n1,0\n1,0\n3,1\n4,1\n5,1\n");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::SchemaError);

  write_fixture(dir.path, "idx,label\n0,0\n");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::SchemaError);

  write_fixture(dir.path, kGoodLabels);
  put_text(manifest, R"({"name": "x", "visual": "visual.dpx"})");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::SchemaError);
  put_text(manifest, "{not json");
  CHECK(code_of([&] { io::load_bundle(manifest); }) == ErrorCode::SchemaError);
}

TEST_CASE("write_bundle round trips with candidates and star") {
  TempDir dir("bundle_rt");
  io::DatasetBundle b;
  b.name = "rt";
  b.visual = random_unit(6, 4, 10);
  b.text = random_unit(6, 4, 11);
  b.star_embedding = random_unit(1, 4, 12);
  io::Perspective p;
  p.concept_name = "shape";
  p.labels = {1, 0, 1, 0, 1, 0};
  p.num_classes = 2;
  p.candidates = io::CandidateFile{"shape", {"round", "square", "spiky"}, random_unit(3, 4, 13)};
  p.label_embeddings = random_unit(2, 4, 14);
  b.perspectives.push_back(p);
  io::write_bundle(b, dir.path);

  const auto back = io::load_bundle(dir.path / "manifest.json");
  CHECK(back.visual == b.visual);
  CHECK(back.text == b.text);
  REQUIRE(back.star_embedding.has_value());
  CHECK(*back.star_embedding == *b.star_embedding);
  const auto& bp = back.perspective("shape");
  CHECK(bp.labels == p.labels);
  REQUIRE(bp.candidates.has_value());
  CHECK(bp.candidates->words == p.candidates->words);
  CHECK(bp.candidates->embeddings == p.candidates->embeddings);
  REQUIRE(bp.label_embeddings.has_value());
  CHECK(*bp.label_embeddings == *p.label_embeddings);
}

TEST_CASE("candidate files reject duplicates and dimension drift") {
  io::CandidateFile c{"color", {"red", "red"}, random_unit(2, 4, 20)};
  CHECK(code_of([&] { io::validate_candidates(c, 4); }) == ErrorCode::SchemaError);
  c.words = {"red", "blue"};
  CHECK_NOTHROW(io::validate_candidates(c, 4));
  CHECK(code_of([&] { io::validate_candidates(c, 5); }) == ErrorCode::DimensionMismatch);
  c.words = {"red"};
  CHECK(code_of([&] { io::validate_candidates(c, 4); }) == ErrorCode::DimensionMismatch);
}
