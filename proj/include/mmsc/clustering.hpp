#pragma once

// Coefficient fusion, affinity construction, spectral clustering, clustering
// metrics and principal-subspace classification of held-out samples.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmsc/numerics.hpp"

namespace mmsc {

/// W_total = sum_t W(t).
Matrix fuse_coefficients(std::span<const Matrix> omega);

/// A = |W| + |W|^T with zero diagonal. With keep_top_q > 0 every column of |W|
/// first keeps only its q largest entries (off by default).
Matrix build_affinity(const Matrix& w_total, std::size_t keep_top_q = 0);

// True when `a` is square, exactly symmetric, nonnegative with zero diagonal.
bool is_valid_affinity(const Matrix& a);

struct KMeansResult {
  std::vector<int> labels;
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts = 20,
                    std::size_t max_iterations = 300);

struct SpectralOptions {
  std::size_t restarts = 20;
  std::size_t max_iterations = 300;
};

/// Normalized spectral clustering: D^-1/2 A D^-1/2, top-P eigenvectors,
/// rows scaled to unit length, k-means. Labels are in [0, P).
std::vector<int> spectral_cluster(const Matrix& affinity, std::size_t clusters, std::uint64_t seed,
                                  const SpectralOptions& options = {});

/// Minimum-cost assignment on a square cost matrix; result[row] = column.
std::vector<std::size_t> hungarian(const Matrix& cost);

/// Accuracy under the best one-to-one matching of predicted to true labels.
double cluster_accuracy(std::span<const int> pred, std::span<const int> truth);

/// Relabels `pred` with the true label it is matched to under cluster_accuracy.
std::vector<int> align_labels(std::span<const int> pred, std::span<const int> truth);

struct AriNmi {
  double ari = 0.0;
  double nmi = 0.0;
  bool nmi_degenerate = false;  // a partition had a single cluster; nmi reported as 0
};

/// Adjusted Rand index and arithmetic-mean normalized mutual information.
AriNmi ari_nmi(std::span<const int> pred, std::span<const int> truth);

struct MetricSet {
  double acc = 0.0;
  double ari = 0.0;
  double nmi = 0.0;
};

MetricSet score_labels(std::span<const int> pred, std::span<const int> truth);

struct ModalitySubspace {
  Vector mean;
  Matrix basis;  // D x d, orthonormal columns
};

struct ClusterSubspaces {
  std::vector<int> cluster_ids;                         // sorted
  std::vector<std::vector<ModalitySubspace>> clusters;  // [cluster][modality]
};

/// Per cluster and modality: subtract the mean and keep the top covariance
/// eigenvectors. With no explicit `dim`, d is the smallest count capturing
/// `variance_fraction` of the cluster's variance.
ClusterSubspaces fit_cluster_subspaces(std::span<const Matrix> features, std::span<const int> labels,
                                       std::optional<std::size_t> dim = std::nullopt,
                                       double variance_fraction = 0.9);

/// argmax_p sum_{t in available} ||B_{p,t}^T (x(t) - mean_{p,t})||^2, ties to
/// the lowest cluster id.
int classify(std::span<const Vector> sample, const ClusterSubspaces& subspaces,
             std::span<const std::size_t> available);

// classify() for every row of the per-modality feature matrices.
std::vector<int> classify_all(std::span<const Matrix> features, const ClusterSubspaces& subspaces,
                              std::span<const std::size_t> available);

}  // namespace mmsc
