#pragma once

// On-disk formats.
//
// DPROXYV1 matrix file:
//   bytes 0..7   ASCII "DPROXYV1"
//   bytes 8..11  rows, uint32 little-endian
//   bytes 12..15 dim,  uint32 little-endian
//   then rows*dim IEEE-754 float32 little-endian values, row-major.
//
// Manifest (UTF-8 JSON), paths relative to the manifest's directory:
//   { "name": ..., "visual": "visual.dpx", "text": "text.dpx", "star": "star.dpx" (optional),
//     "perspectives": [ { "concept": "color", "labels": "labels_color.csv", "M": 3,
//                         "candidates": "candidates_color.json" (optional),
//                         "label_embeddings": "label_names_color.dpx" (optional) } ] }
//
// Labels CSV: header "id,label", one row per sample id in [0, D).
// Candidate JSON: { "concept": ..., "words": [...], "embeddings": "candidates_color.dpx" }.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dproxy/tensor.hpp"

namespace dproxy::io {

/// Unit-norm row vectors (visual, text, candidate or star embeddings).
using EmbeddingMatrix = Tensor2<float>;

inline constexpr char kMagic[8] = {'D', 'P', 'R', 'O', 'X', 'Y', 'V', '1'};
inline constexpr std::size_t kHeaderBytes = 16;
inline constexpr double kUnitNormSlack = 1e-4;

struct LoadedMatrix {
  EmbeddingMatrix matrix;
  std::size_t renormalized_rows = 0;
};

/// Loads an embedding matrix: rows >= 1, dim >= 2, finite values. Rows whose
/// norm differs from 1 by more than 1e-4 are renormalized (with a warning);
/// all other rows are returned bit-exactly.
LoadedMatrix load_matrix(const std::filesystem::path& path);

/// Reads any finite DPROXYV1 matrix without norm handling (checkpoints).
Tensor2<float> read_raw_matrix(const std::filesystem::path& path);

/// Writes a finite matrix in DPROXYV1 layout.
void write_matrix(const Tensor2<float>& matrix, const std::filesystem::path& path);

/// Parses the DPROXYV1 byte layout from memory (shared by both readers).
Tensor2<float> decode_matrix(const std::vector<unsigned char>& bytes, const std::string& origin);
std::vector<unsigned char> encode_matrix(const Tensor2<float>& matrix);

struct CandidateFile {
  std::string concept_name;
  std::vector<std::string> words;
  EmbeddingMatrix embeddings;
};

struct Perspective {
  std::string concept_name;
  std::vector<int> labels;
  int num_classes = 0;  // M
  std::optional<CandidateFile> candidates;
  std::optional<EmbeddingMatrix> label_embeddings;  // row m embeds the name of class m
};

struct DatasetBundle {
  std::string name;
  EmbeddingMatrix visual;
  EmbeddingMatrix text;
  std::vector<Perspective> perspectives;
  std::optional<EmbeddingMatrix> star_embedding;
  std::size_t renormalized_rows = 0;

  std::size_t size() const { return visual.rows; }
  std::size_t dim() const { return visual.cols; }
  /// Throws PerspectiveUnknown.
  const Perspective& perspective(const std::string& concept_name) const;
};

/// Checks every DatasetBundle invariant; throws the specific error.
void validate_bundle(const DatasetBundle& bundle);
void validate_candidates(const CandidateFile& candidates, std::size_t dim);

DatasetBundle load_bundle(const std::filesystem::path& manifest_path);
CandidateFile load_candidates(const std::filesystem::path& json_path);
std::vector<int> load_labels(const std::filesystem::path& csv_path, std::size_t expected_rows);

void write_labels(const std::vector<int>& labels, const std::filesystem::path& csv_path);
/// Writes <stem>.json and <stem>.dpx next to each other.
void write_candidates(const CandidateFile& candidates, const std::filesystem::path& json_path);

/// Writes every file of the bundle plus manifest.json into `dir`, using the
/// file names visual.dpx, text.dpx, star.dpx, labels_<c>.csv,
/// candidates_<c>.{json,dpx}, label_names_<c>.dpx.
void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);

}  // namespace dproxy::io
