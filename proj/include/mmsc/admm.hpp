#pragma once

// Linearized ADMM for the coefficient group on fixed latent features.
//
// Internally features are handled column-wise (Lc = L^T, d x n) so the
// constraint reads Lc W = Lc; multipliers Y(t) therefore have the shape of
// Lc, d x n.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmsc/numerics.hpp"

namespace mmsc {

/// Per position (i, j), scales the cross-modality vector by max(g - beta, 0) / g
/// with g its Euclidean norm. Diagonals are re-zeroed.
std::vector<Matrix> prox_group(std::span<const Matrix> group, double beta);

/// Entrywise sign(b) * max(|b| - tau, 0).
Matrix shrink_l1(const Matrix& b, double tau);

struct AdmmConfig {
  double rho = 0.01;           // l1 weight
  double lambda_group = 1.0;   // group threshold is lambda_group * rho / (mu eta1)
  double lambda_comm = 1.0;    // commutator weight
  double mu0 = 1.0;
  double growth = 1.05;
  std::size_t max_iterations = 500;
  double tol = 1e-6;
  double eta_scale = 1.01;            // eta1 = eta_scale * max_t ||L(t)||_2^2
  std::optional<double> eta;          // explicit eta1 overrides the estimate
  bool refine_features = false;       // apply the feature update between W and Y steps
  bool warm_start = true;             // ridge self-representation as W_0 instead of zeros
};

struct AdmmState {
  std::vector<Matrix> omega;        // n x n, zero diagonal
  std::vector<Matrix> multipliers;  // d_t x n
  std::vector<Matrix> features;     // L(t), n x d_t (codes as rows)
  double mu = 1.0;
  double growth = 1.05;
  double eta = 1.0;
  double rho = 0.01;
  double lambda_group = 1.0;
  double lambda_comm = 1.0;
  bool refine_features = false;
  std::size_t iteration = 0;
};

/// Power-iteration estimate of the largest singular value squared.
double spectral_norm_sq(const Matrix& m, std::size_t iterations = 200, std::uint64_t seed = 0);

AdmmState admm_init(std::span<const Matrix> features, const AdmmConfig& config);

/// One sweep: W half-step (commutator descent + linearized data term), group
/// prox, l1 shrinkage, optional feature update, multiplier update, mu growth.
/// Throws NumericError naming the iteration on a non-finite iterate.
void admm_iterate(AdmmState& state);

// ||L - W^T L||_F for every modality.
std::vector<double> selfexpr_residuals(const AdmmState& state);

struct AdmmReport {
  std::size_t iterations = 0;
  std::vector<std::vector<double>> residuals;  // [iteration][modality]
  std::vector<double> max_relative_residual;   // max_t residual / ||L(t)||_F per iteration
  std::vector<double> commutator_trace;        // commutator penalty after each iteration
  std::vector<Matrix> omega;
  std::vector<Matrix> features;
};

/// Iterates until max_iterations or until max_t ||L - W^T L||_F / ||L||_F < tol.
AdmmReport admm_run(std::span<const Matrix> features, const AdmmConfig& config);

}  // namespace mmsc
