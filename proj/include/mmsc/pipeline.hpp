#pragma once

// Train -> fuse -> affinity -> spectral clustering, and held-out
// classification through per-cluster principal subspaces.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mmsc/clustering.hpp"
#include "mmsc/dataio.hpp"
#include "mmsc/networks.hpp"

namespace mmsc {

struct PipelineOptions {
  std::size_t clusters = 0;  // 0: number of distinct learning labels
  std::optional<std::size_t> subspace_dim;
  double variance_fraction = 0.9;
  bool classify_on_latent = false;  // principal subspaces of codes instead of pixels
  std::size_t affinity_top_q = 0;
  SpectralOptions spectral;

  bool operator==(const PipelineOptions& o) const {
    return clusters == o.clusters && subspace_dim == o.subspace_dim && variance_fraction == o.variance_fraction &&
           classify_on_latent == o.classify_on_latent && affinity_top_q == o.affinity_top_q &&
           spectral.restarts == o.spectral.restarts && spectral.max_iterations == o.spectral.max_iterations;
  }
};

std::size_t resolve_clusters(const PipelineOptions& options, const ModalityDataset& learning);

// Affinity of the fused coefficient matrices of a trained model.
Matrix model_affinity(const MultiBranchAutoencoder& model, std::size_t keep_top_q = 0);

// Spectral labels for a trained model; `seed` drives k-means.
std::vector<int> cluster_model(const MultiBranchAutoencoder& model, std::size_t clusters, std::uint64_t seed,
                               const PipelineOptions& options);

struct TrainedRun {
  MultiBranchAutoencoder model;
  TrainResult training;
  ModalityDataset learning;  // what the model was trained on
  Matrix affinity;
  std::vector<int> labels;   // predicted learning-set clusters
  std::optional<MetricSet> learning_metrics;
  ClusterSubspaces subspaces;
};

// Per-modality features used for subspace classification.
std::vector<Matrix> classification_features(const MultiBranchAutoencoder& model, const ModalityDataset& data,
                                            bool latent);

/// Trains a fresh model (config.seed is replaced by `seed`), clusters the
/// learning set and fits the classification subspaces on the predicted clusters.
TrainedRun train_and_cluster(const ModalityDataset& learning, ModelConfig config, const PipelineOptions& options,
                             std::uint64_t seed);

// Clusters an already trained model and fits its subspaces.
TrainedRun cluster_trained(MultiBranchAutoencoder model, TrainResult training, const ModalityDataset& learning,
                           const PipelineOptions& options, std::uint64_t seed);

/// Classifies every sample of `test` using only the `available` modalities
/// (empty means all).
std::vector<int> classify_dataset(const TrainedRun& run, const ModalityDataset& test,
                                  const std::vector<std::size_t>& available, const PipelineOptions& options);

/// Thread-safe memo of trained runs keyed by an arbitrary string.
class RunCache {
 public:
  std::shared_ptr<const TrainedRun> get_or_run(const std::string& key,
                                               const std::function<TrainedRun()>& make);
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const TrainedRun>> runs_;
};

}  // namespace mmsc
