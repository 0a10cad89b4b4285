#pragma once

// Multimodal datasets: the synthetic union-of-subspaces generator, the
// on-disk dataset directory format, and affinity/label CSV helpers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmsc/numerics.hpp"

namespace mmsc {

enum class Split { learning, validation };

std::string to_string(Split s);
Split split_from_string(std::string_view s);

/// T aligned views of the same n samples. Each modality is an n x (h*w)
/// matrix whose rows are row-major grayscale images.
struct ModalityDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Matrix> modalities;
  std::vector<int> labels;  // empty when unlabeled
  Split split = Split::learning;

  std::size_t num_modalities() const { return modalities.size(); }
  std::size_t num_samples() const {
    return modalities.empty() ? 0 : static_cast<std::size_t>(modalities.front().rows());
  }
  std::size_t pixels() const { return height * width; }
  bool has_labels() const { return !labels.empty(); }

  // Throws DimensionError / NumericError when the invariants do not hold.
  void validate() const;

  // Rows `idx` of every modality (and label).
  ModalityDataset subset(const std::vector<std::size_t>& idx) const;
};

struct SyntheticSpec {
  std::size_t clusters = 4;
  std::size_t per_cluster = 40;
  std::size_t side = 8;  // h = w
  std::size_t modalities = 3;
  std::size_t shared_dim = 3;
  std::size_t private_dim = 2;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  static SyntheticSpec fixture();
};

/// Unnormalized generator output, kept for tests that need the planted structure.
struct SyntheticRaw {
  std::vector<Matrix> modalities;          // n x (side*side) each
  std::vector<int> labels;                 // cluster of every sample
  Matrix shared_coefficients;              // n x shared_dim, identical across modalities
  std::vector<Matrix> shared_bases;        // per cluster: pixels x shared_dim
  std::vector<std::vector<Matrix>> private_bases;  // [cluster][modality]: pixels x private_dim
};

struct SyntheticDataset {
  ModalityDataset learning;
  ModalityDataset validation;
};

// Draws samples x(t) = S_p c + P_{p,t} e_t + sigma * noise, in cluster order.
SyntheticRaw gen_synthetic_raw(const SyntheticSpec& spec);

// Min-max normalizes each modality to [0, 1], shuffles, and makes a
// stratified 75/25 learning/validation split.
SyntheticDataset gen_synthetic(const SyntheticSpec& spec);

// In-place per-modality min-max normalization to [0, 1].
void normalize_unit_range(ModalityDataset& ds);

/// Writes manifest.json, modality_<t>.f64 and labels.csv into `dir`.
void save_dataset(const ModalityDataset& ds, const std::filesystem::path& dir);
ModalityDataset load_dataset(const std::filesystem::path& dir);

// Writes learning/ and validation/ subdirectories.
void save_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir);
// Accepts either a split directory or a root with learning/ (and optionally validation/).
SyntheticDataset load_splits(const std::filesystem::path& dir);

// Lowercase hex SHA-256 of a file's bytes, or of a byte string.
std::string sha256_file(const std::filesystem::path& file);
std::string sha256_hex(std::string_view bytes);

// labels.csv: header "sample_id,label", one row per sample.
void write_labels_csv(const std::filesystem::path& file, const std::vector<int>& labels);
std::vector<int> read_labels_csv(const std::filesystem::path& file);

// Plain comma-separated dense matrix, one row per line, no header.
void write_matrix_csv(const std::filesystem::path& file, const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& file);

}  // namespace mmsc
