#include "mmsc/pipeline.hpp"

#include <set>

namespace mmsc {

std::size_t resolve_clusters(const PipelineOptions& options, const ModalityDataset& learning) {
  if (options.clusters > 0) return options.clusters;
  if (!learning.has_labels()) {
    throw ConfigError("number of clusters not given and the learning set has no labels");
  }
  return std::set<int>(learning.labels.begin(), learning.labels.end()).size();
}

Matrix model_affinity(const MultiBranchAutoencoder& model, std::size_t keep_top_q) {
  return build_affinity(fuse_coefficients(model.coefficients), keep_top_q);
}

std::vector<int> cluster_model(const MultiBranchAutoencoder& model, std::size_t clusters, std::uint64_t seed,
                               const PipelineOptions& options) {
  return spectral_cluster(model_affinity(model, options.affinity_top_q), clusters, seed, options.spectral);
}

std::vector<Matrix> classification_features(const MultiBranchAutoencoder& model, const ModalityDataset& data,
                                            bool latent) {
  if (!latent) return data.modalities;
  std::vector<Matrix> out;
  for (std::size_t t = 0; t < data.num_modalities(); ++t) out.push_back(encode(model, t, data.modalities[t]));
  return out;
}

TrainedRun cluster_trained(MultiBranchAutoencoder model, TrainResult training, const ModalityDataset& learning,
                           const PipelineOptions& options, std::uint64_t seed) {
  TrainedRun run;
  run.model = std::move(model);
  run.training = std::move(training);
  run.learning = learning;
  run.affinity = model_affinity(run.model, options.affinity_top_q);
  const std::size_t P = resolve_clusters(options, learning);
  run.labels = spectral_cluster(run.affinity, P, seed, options.spectral);
  if (learning.has_labels()) run.learning_metrics = score_labels(run.labels, learning.labels);
  run.subspaces = fit_cluster_subspaces(classification_features(run.model, learning, options.classify_on_latent),
                                        run.labels, options.subspace_dim, options.variance_fraction);
  return run;
}

TrainedRun train_and_cluster(const ModalityDataset& learning, ModelConfig config, const PipelineOptions& options,
                             std::uint64_t seed) {
  config.seed = seed;
  config.modalities = learning.num_modalities();
  config.height = learning.height;
  config.width = learning.width;
  MultiBranchAutoencoder model = build_model(config, learning.num_samples());
  TrainResult result = train(model, learning);
  return cluster_trained(std::move(model), std::move(result), learning, options, seed);
}

std::vector<int> classify_dataset(const TrainedRun& run, const ModalityDataset& test,
                                  const std::vector<std::size_t>& available, const PipelineOptions& options) {
  std::vector<std::size_t> avail = available;
  if (avail.empty()) {
    for (std::size_t t = 0; t < test.num_modalities(); ++t) avail.push_back(t);
  }
  return classify_all(classification_features(run.model, test, options.classify_on_latent), run.subspaces, avail);
}

std::shared_ptr<const TrainedRun> RunCache::get_or_run(const std::string& key,
                                                       const std::function<TrainedRun()>& make) {
  {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
  }
  auto run = std::make_shared<const TrainedRun>(make());
  std::lock_guard lock(mutex_);
  return runs_.emplace(key, std::move(run)).first->second;
}

std::size_t RunCache::size() const {
  std::lock_guard lock(mutex_);
  return runs_.size();
}

}  // namespace mmsc
