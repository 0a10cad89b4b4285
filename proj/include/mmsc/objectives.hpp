#pragma once

// Loss terms for the three variants and their hand-written gradients.

#include <cstdint>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "mmsc/networks.hpp"

namespace mmsc {

struct LossBreakdown {
  double commutator_term = 0.0;
  double group_term = 0.0;
  double recon_term = 0.0;
  double l1_term = 0.0;
  double selfexpr_term = 0.0;
  double frobenius_term = 0.0;
  double total = 0.0;
};

// total = lc*comm + lg*group + (gamma/2)*recon + rho*l1 + (mu/2)*selfexpr + lf*frob
double combine(const LossBreakdown& terms, const Hyperparameters& hyper);

/// sum over positions (k, j) of sqrt(sum_t w_kj(t)^2).
double group_l12_norm(std::span<const Matrix> group);

/// A B - B A.
Matrix commutator(const Matrix& a, const Matrix& b);

/// sum over ordered pairs t1 != t2 of ||[W(t1), W(t2)]||_F^2.
double commutator_penalty(std::span<const Matrix> group);

// Gradient pieces of the coefficient-only terms, for modality t of `group`.
Matrix commutator_penalty_grad(std::span<const Matrix> group, std::size_t t);
// w / sqrt(sum_t w^2) per entry; 0 where the whole group is zero.
Matrix group_norm_grad(std::span<const Matrix> group, std::size_t t);
// sign(w), with sign(0) = 0.
Matrix l1_grad(const Matrix& w);

LossBreakdown drogsure_loss(const ForwardCache& cache, std::span<const Matrix> omega,
                            const ModalityDataset& data, const Hyperparameters& hyper);
LossBreakdown dmsc_loss(const ForwardCache& cache, const Matrix& w, const ModalityDataset& data,
                        const Hyperparameters& hyper);
LossBreakdown concat_loss(const ForwardCache& cache, const Matrix& w, const ModalityDataset& data,
                          const Hyperparameters& hyper);

// Reconstruction-only loss (gamma/2) sum_t ||X(t) - X_r(t)||^2, used in pretraining.
LossBreakdown reconstruction_loss(const ForwardCache& cache, const ModalityDataset& data,
                                  const Hyperparameters& hyper);

// Dispatches on the model variant (or reconstruction-only when cache.bypass).
LossBreakdown model_loss(const MultiBranchAutoencoder& model, const ForwardCache& cache,
                         const ModalityDataset& data);

/// Which gradient blocks to fill. `branch` restricts encoder/decoder blocks to
/// one modality; for drogsure it also restricts the coefficient block.
struct BackpropRequest {
  std::optional<std::size_t> branch;
  bool encoders = true;
  bool decoders = true;
  bool coefficients = true;
};

/// Analytic gradients of the variant loss (or the reconstruction loss when the
/// cache was built with the self-expressive layer bypassed). Diagonal entries
/// of coefficient gradients are reported as computed. Requested blocks are
/// overwritten; others are left untouched.
void backprop(const MultiBranchAutoencoder& model, const ModalityDataset& data, const ForwardCache& cache,
              const BackpropRequest& request, Gradients& grads);

Gradients backprop(const MultiBranchAutoencoder& model, const ModalityDataset& data,
                   bool bypass_self_expression = false);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;  // on ||analytic - numeric|| / max(||analytic||, ||numeric||)
  bool bypass_self_expression = false;
  std::optional<std::string> inject_bug;  // test hook: corrupt this block's analytic gradient
};

struct GradCheckEntry {
  std::string block;
  std::size_t coordinates = 0;  // checked entries (coefficient diagonals are constrained and skipped)
  double max_abs_error = 0.0;
  double rel_error = 0.0;
  bool passed = false;
};

/// Central differences against backprop for every parameter block.
std::vector<GradCheckEntry> gradient_check(MultiBranchAutoencoder& model, const ModalityDataset& data,
                                           const GradCheckOptions& options = {});

struct GradCheckToy {
  MultiBranchAutoencoder model;
  ModalityDataset data;
};

// T=2, n=4, 6x6 images, two-layer encoders, coefficients drawn well away from zero.
GradCheckToy make_gradcheck_toy(Variant variant, std::uint64_t seed = 0);

}  // namespace mmsc
