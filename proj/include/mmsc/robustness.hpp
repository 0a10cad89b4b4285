#pragma once

// Corruption operators, scenario sweeps and empirical checks of the
// affinity-perturbation bounds.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsc/dataio.hpp"
#include "mmsc/pipeline.hpp"

namespace mmsc {

enum class CorruptionKind { none, shuffle, gaussian_snr };
enum class Phase { train, test };

std::string to_string(CorruptionKind k);
CorruptionKind corruption_from_string(std::string_view s);
std::string to_string(Phase p);
Phase phase_from_string(std::string_view s);

struct Scenario {
  std::string name = "clean";
  CorruptionKind kind = CorruptionKind::none;
  std::vector<std::size_t> targets;          // corrupted modalities
  double snr_db = std::numeric_limits<double>::infinity();
  Phase phase = Phase::train;
  std::vector<std::size_t> available;        // test modalities; empty means all
  bool sweep_subsets = false;                // evaluate every subset of `available`
  std::vector<std::uint64_t> seeds{0};

  // Throws ConfigError listing every problem for a dataset with T modalities.
  void validate(std::size_t modalities) const;

  bool operator==(const Scenario&) const = default;
};

/// One fixed pixel permutation drawn from `seed`, applied to every image of modality t.
ModalityDataset shuffle_pixels(const ModalityDataset& data, std::size_t t, std::uint64_t seed);

/// Adds N(0, P/10^(snr/10)) noise to modality t, P the mean squared pixel value.
/// snr_db = +inf returns the input unchanged.
ModalityDataset add_gaussian_snr(const ModalityDataset& data, std::size_t t, double snr_db, std::uint64_t seed);

// Applies the scenario's corruption to every target modality.
ModalityDataset corrupt(const ModalityDataset& data, const Scenario& scenario, std::uint64_t seed);

struct PerturbationReport {
  double frob_distance = 0.0;     // ||A - A~||_F
  double max_entry_delta = 0.0;   // max |Delta_ij|
  double bound_n_eps = 0.0;       // n * max_entry_delta
  double projector_distance = 0.0;
  double spectral_gap = 0.0;      // |lambda_P - lambda_{P+1}| of A
  double bound_rhs = 0.0;         // sqrt(2) / gap * ||A - A~||_F
  bool frob_bound_holds = false;
  bool projector_bound_holds = false;
  bool gap_degenerate = false;    // gap <= 1e-8; projector check skipped
};

inline constexpr double kGapTolerance = 1e-8;

/// Rank-P spectral projectors use the eigenvectors of the P largest eigenvalues.
PerturbationReport perturbation_report(const Matrix& clean, const Matrix& perturbed, std::size_t clusters);

nlohmann::json to_json(const PerturbationReport& r);

// Block-diagonal affinity: equal blocks with entries in [0.5, 1], off-block
// entries in [0, 0.05], symmetric with zero diagonal.
Matrix planted_affinity(std::size_t samples, std::size_t clusters, std::uint64_t seed);

/// `count` random symmetric zero-diagonal perturbations of `clean`, each with
/// Frobenius norm drawn in [0.1, 1] * scale * gap, negative entries of the
/// perturbed affinity clipped to 0.
std::vector<PerturbationReport> perturbation_sweep(const Matrix& clean, std::size_t clusters, std::size_t count,
                                                   double scale, std::uint64_t seed);

struct ExperimentRow {
  std::string scenario;
  std::string variant;
  std::uint64_t seed = 0;
  std::string phase;                  // learning | validation
  std::string modalities_available;   // e.g. "0;2"
  std::size_t subset_size = 0;
  double acc = 0.0;
  double ari = 0.0;
  double nmi = 0.0;
  double acc_drop = 0.0;
};

struct ExperimentReport {
  std::vector<ExperimentRow> rows;
  std::vector<std::string> warnings;
};

struct ExperimentSpec {
  ModelConfig model;
  PipelineOptions options;
  std::vector<Variant> variants{Variant::drogsure};
  std::vector<Scenario> scenarios;
};

/// Trains (or reuses from `cache`) every variant x seed x train-time corruption,
/// then evaluates learning-set clustering and validation-set classification.
/// acc_drop is clean minus scenario ACC for the matching clean cell.
ExperimentReport run_experiment(const SyntheticDataset& data, const ExperimentSpec& spec, RunCache& cache,
                                std::size_t jobs = 1);

ExperimentReport run_scenario(const SyntheticDataset& data, const ModelConfig& model,
                              const PipelineOptions& options, const Scenario& scenario,
                              const std::vector<Variant>& variants, RunCache& cache);

std::string to_csv(const ExperimentReport& report);
nlohmann::json to_json(const ExperimentReport& report);

// Mean ACC over rows matching the filter (empty strings match anything; subset_size 0 matches any).
double mean_acc(const ExperimentReport& report, const std::string& scenario, const std::string& variant,
                const std::string& phase, std::size_t subset_size = 0);

struct VariantResilience {
  Variant variant = Variant::drogsure;
  double mean_acc_drop = 0.0;
  // E(max|Delta|^2) with every coefficient matrix's affinity scaled to unit
  // maximum and the T modality affinities averaged (one matrix for shared variants)
  double mean_sq_perturbation = 0.0;
  // Same statistic on the fused affinity scaled by its own maximum (informational)
  double mean_sq_fused_max_perturbation = 0.0;
  std::vector<double> drops;
  std::vector<double> perturbations;
  std::vector<double> fused_max_perturbations;
};

struct ResilienceReport {
  std::vector<VariantResilience> variants;
  bool ordering_asserted = true;   // false when every modality is corrupted
  bool drogsure_drop_le_dmsc = false;
  bool perturbation_ordering = false;  // E(eps^2) < E(psi^2)
  double perturbation_ratio = 0.0;     // E(psi^2) / E(eps^2)
};

/// Clean vs train-time-corrupted runs per variant and seed; needs at least
/// two variants (drogsure and dmsc) and three seeds.
ResilienceReport resilience_comparison(const SyntheticDataset& data, const ModelConfig& model,
                                       const PipelineOptions& options, const std::vector<Variant>& variants,
                                       const Scenario& corruption, RunCache& cache);

nlohmann::json to_json(const ResilienceReport& r);

}  // namespace mmsc
