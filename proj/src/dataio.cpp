#include "mmsc/dataio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>

namespace mmsc {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) { return s == Split::learning ? "learning" : "validation"; }

Split split_from_string(std::string_view s) {
  if (s == "learning") return Split::learning;
  if (s == "validation") return Split::validation;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected learning or validation)");
}

void ModalityDataset::validate() const {
  if (modalities.empty()) throw DimensionError("dataset has no modalities");
  const Eigen::Index n = modalities.front().rows();
  for (std::size_t t = 0; t < modalities.size(); ++t) {
    const auto& m = modalities[t];
    if (m.rows() != n) {
      throw DimensionError("modality " + std::to_string(t) + " has " + std::to_string(m.rows()) +
                           " samples, expected " + std::to_string(n));
    }
    if (static_cast<std::size_t>(m.cols()) != pixels()) {
      throw DimensionError("modality " + std::to_string(t) + " has " + std::to_string(m.cols()) +
                           " pixels, expected " + std::to_string(pixels()));
    }
    require_finite(m, "modality " + std::to_string(t));
  }
  if (!labels.empty() && labels.size() != static_cast<std::size_t>(n)) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match " +
                         std::to_string(n) + " samples");
  }
}

ModalityDataset ModalityDataset::subset(const std::vector<std::size_t>& idx) const {
  ModalityDataset out;
  out.height = height;
  out.width = width;
  out.split = split;
  for (const auto& m : modalities) {
    Matrix s(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= static_cast<std::size_t>(m.rows())) throw DimensionError("subset index out of range");
      s.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
    }
    out.modalities.push_back(std::move(s));
  }
  if (!labels.empty()) {
    for (std::size_t i : idx) out.labels.push_back(labels.at(i));
  }
  return out;
}

void SyntheticSpec::validate() const {
  std::vector<std::string> errors;
  if (clusters < 2) errors.push_back("clusters must be at least 2");
  if (modalities < 2) errors.push_back("modalities must be at least 2");
  if (per_cluster < 4) errors.push_back("per_cluster must be at least 4");
  if (side == 0) errors.push_back("side must be positive");
  if (shared_dim + private_dim == 0) errors.push_back("shared_dim + private_dim must be positive");
  if (shared_dim + private_dim > side * side) {
    errors.push_back("shared_dim + private_dim (" + std::to_string(shared_dim + private_dim) +
                     ") exceeds pixels per image (" + std::to_string(side * side) + ")");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) errors.push_back("noise_sigma must be finite and >= 0");
  if (!errors.empty()) {
    std::string msg = "invalid synthetic spec:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

SyntheticSpec SyntheticSpec::fixture() { return SyntheticSpec{}; }

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  // fill row-major so the draw order does not depend on Eigen's storage
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

Matrix orthonormal_columns(const Matrix& m) {
  Eigen::HouseholderQR<Matrix> qr(m);
  return qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
}

SyntheticRaw generate(const SyntheticSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const auto D = static_cast<Eigen::Index>(spec.side * spec.side);
  const auto ds = static_cast<Eigen::Index>(spec.shared_dim);
  const auto dp = static_cast<Eigen::Index>(spec.private_dim);
  const auto T = spec.modalities;
  const auto n = static_cast<Eigen::Index>(spec.clusters * spec.per_cluster);

  SyntheticRaw raw;
  // Shared and private bases are drawn jointly orthonormal when they fit.
  const bool joint = ds + static_cast<Eigen::Index>(T) * dp <= D;
  for (std::size_t p = 0; p < spec.clusters; ++p) {
    std::vector<Matrix> priv;
    if (joint) {
      const Matrix q = orthonormal_columns(gaussian(D, ds + static_cast<Eigen::Index>(T) * dp, rng));
      raw.shared_bases.push_back(q.leftCols(ds));
      for (std::size_t t = 0; t < T; ++t) priv.push_back(q.middleCols(ds + static_cast<Eigen::Index>(t) * dp, dp));
    } else {
      raw.shared_bases.push_back(orthonormal_columns(gaussian(D, ds, rng)));
      for (std::size_t t = 0; t < T; ++t) {
        Matrix both(D, ds + dp);
        both << raw.shared_bases.back(), gaussian(D, dp, rng);
        priv.push_back(orthonormal_columns(both).rightCols(dp));
      }
    }
    raw.private_bases.push_back(std::move(priv));
  }

  raw.modalities.assign(T, Matrix(n, D));
  raw.shared_coefficients.resize(n, ds);
  Eigen::Index row = 0;
  for (std::size_t p = 0; p < spec.clusters; ++p) {
    for (std::size_t k = 0; k < spec.per_cluster; ++k, ++row) {
      const Matrix c = gaussian(ds, 1, rng);
      raw.shared_coefficients.row(row) = c.transpose();
      raw.labels.push_back(static_cast<int>(p));
      for (std::size_t t = 0; t < T; ++t) {
        Vector x = raw.shared_bases[p] * c.col(0);
        if (dp > 0) x += raw.private_bases[p][t] * gaussian(dp, 1, rng).col(0);
        if (spec.noise_sigma > 0.0) x += spec.noise_sigma * gaussian(D, 1, rng).col(0);
        raw.modalities[t].row(row) = x.transpose();
      }
    }
  }
  return raw;
}

}  // namespace

SyntheticRaw gen_synthetic_raw(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  return generate(spec, rng);
}

void normalize_unit_range(ModalityDataset& ds) {
  for (auto& m : ds.modalities) {
    if (m.size() == 0) continue;
    const double lo = m.minCoeff(), hi = m.maxCoeff();
    if (hi > lo) {
      m = (m.array() - lo) / (hi - lo);
    } else {
      m.setZero();
    }
  }
}

SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  SyntheticRaw raw = generate(spec, rng);

  ModalityDataset all;
  all.height = all.width = spec.side;
  all.modalities = std::move(raw.modalities);
  all.labels = raw.labels;
  normalize_unit_range(all);

  // stratified 75/25 split, then shuffle each side
  std::vector<std::size_t> learn, valid;
  for (std::size_t p = 0; p < spec.clusters; ++p) {
    std::vector<std::size_t> idx(spec.per_cluster);
    std::iota(idx.begin(), idx.end(), p * spec.per_cluster);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t cut = (spec.per_cluster * 3 + 2) / 4;
    learn.insert(learn.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    valid.insert(valid.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  }
  std::shuffle(learn.begin(), learn.end(), rng);
  std::shuffle(valid.begin(), valid.end(), rng);

  SyntheticDataset out;
  out.learning = all.subset(learn);
  out.learning.split = Split::learning;
  out.validation = all.subset(valid);
  out.validation.split = Split::validation;
  return out;
}

namespace {

std::string finish_digest(EVP_MD_CTX* ctx) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

}  // namespace

std::string sha256_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  return finish_digest(ctx);
}

std::string sha256_hex(std::string_view bytes) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  return finish_digest(ctx);
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const fs::path& file, std::size_t line) {
  double v = 0.0;
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError(file.string() + ":" + std::to_string(line) + ": not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

void write_f64(const fs::path& file, const Matrix& m) {
  std::vector<double> values = to_row_major(m);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      bits = __builtin_bswap64(bits);
      v = std::bit_cast<double>(bits);
    }
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw IoError("short write to " + file.string());
}

Matrix read_f64(const fs::path& file, std::size_t rows, std::size_t cols) {
  if (!fs::exists(file)) throw IoError("missing file " + file.string());
  const auto expected = rows * cols * sizeof(double);
  if (fs::file_size(file) != expected) {
    throw IoError(file.string() + " holds " + std::to_string(fs::file_size(file)) + " bytes, manifest implies " +
                  std::to_string(expected));
  }
  std::vector<double> values(rows * cols);
  std::ifstream in(file, std::ios::binary);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(expected));
  if (!in) throw IoError("short read from " + file.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : values) v = std::bit_cast<double>(__builtin_bswap64(std::bit_cast<std::uint64_t>(v)));
  }
  return from_row_major(values, rows, cols);
}

constexpr int kManifestVersion = 1;

}  // namespace

void write_labels_csv(const fs::path& file, const std::vector<int>& labels) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "sample_id,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << ',' << labels[i] << '\n';
}

std::vector<int> read_labels_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("sample_id,label", 0) != 0) throw IoError(file.string() + ": expected header sample_id,label");
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != 2) throw IoError(file.string() + ":" + std::to_string(lineno) + ": expected 2 fields");
    const auto id = parse_double(fields[0], file, lineno);
    if (id != static_cast<double>(labels.size())) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": sample ids must be 0..n-1 in order");
    }
    const double label = parse_double(fields[1], file, lineno);
    if (label != std::floor(label)) throw IoError(file.string() + ":" + std::to_string(lineno) + ": label is not an integer");
    labels.push_back(static_cast<int>(label));
  }
  return labels;
}

void write_matrix_csv(const fs::path& file, const Matrix& m) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j > 0) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

Matrix read_matrix_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    for (auto f : split_commas(line)) row.push_back(parse_double(f, file, lineno));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

void save_dataset(const ModalityDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kManifestVersion;
  manifest["modalities"] = ds.num_modalities();
  manifest["samples"] = ds.num_samples();
  manifest["height"] = ds.height;
  manifest["width"] = ds.width;
  manifest["dtype"] = "float64-le";
  manifest["split"] = to_string(ds.split);
  json files = json::array();
  json sums = json::object();
  for (std::size_t t = 0; t < ds.num_modalities(); ++t) {
    const std::string name = "modality_" + std::to_string(t) + ".f64";
    write_f64(dir / name, ds.modalities[t]);
    files.push_back(name);
    sums[name] = sha256_file(dir / name);
  }
  manifest["files"] = files;
  if (ds.has_labels()) {
    write_labels_csv(dir / "labels.csv", ds.labels);
    manifest["labels"] = "labels.csv";
    sums["labels.csv"] = sha256_file(dir / "labels.csv");
  } else {
    manifest["labels"] = nullptr;
  }
  manifest["sha256"] = sums;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

ModalityDataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no manifest.json in " + dir.string());
  json manifest;
  try {
    std::ifstream in(mpath);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(mpath.string() + ": " + e.what());
  }
  ModalityDataset ds;
  std::size_t T = 0, n = 0;
  std::vector<std::string> files;
  try {
    if (manifest.at("format_version").get<int>() != kManifestVersion) {
      throw IoError(mpath.string() + ": unsupported format_version");
    }
    if (manifest.at("dtype").get<std::string>() != "float64-le") throw IoError(mpath.string() + ": unsupported dtype");
    T = manifest.at("modalities").get<std::size_t>();
    n = manifest.at("samples").get<std::size_t>();
    ds.height = manifest.at("height").get<std::size_t>();
    ds.width = manifest.at("width").get<std::size_t>();
    ds.split = split_from_string(manifest.at("split").get<std::string>());
    files = manifest.at("files").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(mpath.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(mpath.string() + ": " + e.what());
  }
  if (files.size() != T) throw IoError(mpath.string() + ": file list does not match modality count");
  const json sums = manifest.value("sha256", json::object());
  auto check = [&](const std::string& name) {
    if (!sums.contains(name)) return;
    if (sha256_file(dir / name) != sums.at(name).get<std::string>()) {
      throw IoError("checksum mismatch for " + (dir / name).string());
    }
  };
  for (const auto& f : files) {
    if (!fs::exists(dir / f)) throw IoError("missing file " + (dir / f).string());
    ds.modalities.push_back(read_f64(dir / f, n, ds.height * ds.width));
    check(f);
  }
  if (manifest.contains("labels") && manifest["labels"].is_string()) {
    const std::string lf = manifest["labels"].get<std::string>();
    ds.labels = read_labels_csv(dir / lf);
    check(lf);
  }
  ds.validate();
  return ds;
}

void save_synthetic(const SyntheticDataset& ds, const fs::path& dir) {
  save_dataset(ds.learning, dir / "learning");
  save_dataset(ds.validation, dir / "validation");
}

SyntheticDataset load_splits(const fs::path& dir) {
  SyntheticDataset out;
  if (fs::exists(dir / "manifest.json")) {
    out.learning = load_dataset(dir);
    return out;
  }
  if (!fs::exists(dir / "learning" / "manifest.json")) {
    throw IoError("no dataset found at " + dir.string() + " (expected manifest.json or learning/manifest.json)");
  }
  out.learning = load_dataset(dir / "learning");
  if (fs::exists(dir / "validation" / "manifest.json")) out.validation = load_dataset(dir / "validation");
  return out;
}

}  // namespace mmsc
