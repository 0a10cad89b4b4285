#pragma once

// The three autoencoder variants and their block-coordinate trainer.
//
//   drogsure  T encoder/decoder banks, one zero-diagonal coefficient matrix per modality
//   dmsc      T encoder/decoder banks sharing a single coefficient matrix
//   concat    T encoders whose codes are concatenated, one coefficient matrix,
//             every decoder branch fed the full self-expressed stack
//
// Codes are rows: L(t) is n x d_t and self-expression computes W^T L, so row i
// of the result is sum_j W_ji L_j.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmsc/dataio.hpp"
#include "mmsc/numerics.hpp"

namespace mmsc {

enum class Variant { drogsure, dmsc, concat };

std::string to_string(Variant v);
Variant variant_from_string(std::string_view s);

struct LayerSpec {
  std::size_t filters = 1;
  std::size_t kernel = 3;
  Activation activation = Activation::relu;

  bool operator==(const LayerSpec&) const = default;
};

// Encoder presets from the two reference network layouts.
std::vector<LayerSpec> arl_encoder();  // 5/3, 7/1, 15/1
std::vector<LayerSpec> eyb_encoder();  // 10/5, 20/3, 30/3

struct Hyperparameters {
  double gamma = 1.0;          // reconstruction weight (gamma/2)
  double rho = 0.01;           // entrywise l1 weight
  double mu = 1.0;             // self-expression weight (mu/2)
  double lambda_group = 1.0;   // group l1,2 weight
  double lambda_comm = 1.0;    // commutator weight
  double lambda_frobenius = 1.0;  // shared-coefficient Frobenius regularizer (dmsc)

  bool operator==(const Hyperparameters&) const = default;
};

struct ModelConfig {
  Variant variant = Variant::drogsure;
  std::size_t modalities = 2;
  std::vector<LayerSpec> encoder_layers = arl_encoder();
  std::size_t height = 8;
  std::size_t width = 8;
  Hyperparameters hyper;
  double learning_rate = 1e-3;
  double coefficient_init = 1e-4;  // SE init half-width
  std::size_t pretrain_epochs = 200;
  std::size_t finetune_epochs = 1000;
  std::uint64_t seed = 0;

  // Throws ConfigError listing every violated constraint.
  void validate() const;
  // Same, without the 3..6 depth restriction (toy models and tests).
  void validate_shapes() const;

  bool operator==(const ModelConfig&) const = default;
};

/// One convolution layer. Encoder layers run conv2d; decoder layers run
/// conv2d_transpose, so their kernel maps kernel.out_channels -> kernel.in_channels.
struct ConvLayer {
  ConvKernel kernel;
  std::vector<double> bias;
  Activation activation = Activation::relu;
};

struct Branch {
  std::vector<ConvLayer> encoder;
  std::vector<ConvLayer> decoder;
};

struct MultiBranchAutoencoder {
  ModelConfig config;
  std::size_t samples = 0;
  std::vector<Branch> branches;
  std::vector<Matrix> coefficients;  // T matrices for drogsure, one otherwise

  std::size_t num_modalities() const { return branches.size(); }
  bool shared_coefficients() const { return config.variant != Variant::drogsure; }
  const Matrix& coefficients_for(std::size_t t) const {
    return shared_coefficients() ? coefficients.front() : coefficients[t];
  }
  std::size_t latent_channels(std::size_t t) const;
  std::size_t latent_dim(std::size_t t) const;
  std::size_t stacked_channels() const;
};

/// Gradients share the model's layout; only the numeric buffers are used.
struct Gradients {
  std::vector<Branch> branches;
  std::vector<Matrix> coefficients;
  bool shared_coefficients = false;
};

Gradients zeros_like(const MultiBranchAutoencoder& model);

/// A named view of one parameter tensor, in declaration order.
struct ParamBlock {
  std::string name;
  std::span<double> values;
};

std::vector<ParamBlock> parameter_blocks(MultiBranchAutoencoder& model);
std::vector<ParamBlock> parameter_blocks(Gradients& grads);

MultiBranchAutoencoder build_model(const ModelConfig& config, std::size_t n);

// Same as build_model but skips the encoder-depth restriction.
MultiBranchAutoencoder build_model_unchecked(const ModelConfig& config, std::size_t n);

// Images of one modality as an n x h x w x 1 feature map.
FeatureMap as_feature_map(const Matrix& images, std::size_t h, std::size_t w);

struct BranchCache {
  std::vector<FeatureMap> encoder_out;  // output of every encoder layer
  Matrix latent;                        // L(t), n x d_t
  Matrix expressed;                     // W^T L(t); unused for concat
  FeatureMap decoder_in;
  std::vector<FeatureMap> decoder_out;  // last entry is the reconstruction
};

struct ForwardCache {
  std::vector<BranchCache> branches;
  Matrix stacked;            // concat: N = [L(1) | ... | L(T)]
  Matrix stacked_expressed;  // concat: W^T N
  bool bypass = false;       // self-expression skipped (pretraining)

  Matrix reconstruction(std::size_t t) const;
};

Matrix encode(const MultiBranchAutoencoder& model, std::size_t t, const Matrix& images);

/// W^T L. Throws InvariantError when W has a nonzero diagonal entry.
Matrix self_express(const Matrix& latent, const Matrix& coefficients);

// Concatenated code rows <-> channel-stacked feature map (concat decoder input).
FeatureMap stack_to_map(const Matrix& stacked, std::size_t h, std::size_t w,
                        const std::vector<std::size_t>& channels);
Matrix map_to_stack(const FeatureMap& map, const std::vector<std::size_t>& channels);

/// Full forward pass. With `bypass_self_expression` the decoders see the raw
/// codes, which is how reconstruction-only pretraining runs.
ForwardCache forward(const MultiBranchAutoencoder& model, const ModalityDataset& data,
                     bool bypass_self_expression = false);

// Recompute branch t only (valid for drogsure and dmsc).
void forward_branch(const MultiBranchAutoencoder& model, const ModalityDataset& data, std::size_t t,
                    ForwardCache& cache);

struct TrainState {
  std::vector<OptimizerState> optimizers;  // aligned with parameter_blocks(model)
  std::vector<double> loss_trace;
  std::size_t epochs_done = 0;
  std::vector<std::string> warnings;
};

TrainState make_train_state(MultiBranchAutoencoder& model);

/// Runs epochs until `state.epochs_done` reaches pretrain + finetune epochs.
/// Phase 1 trains encoders/decoders on reconstruction alone with the
/// self-expressive layers bypassed. Phase 2 sweeps modalities in order and, for
/// each, steps the encoder, then the coefficient block, then the decoder,
/// re-zeroing every coefficient diagonal after each step.
void train(MultiBranchAutoencoder& model, const ModalityDataset& data, TrainState& state);

struct TrainResult {
  std::vector<double> loss_trace;
  std::vector<std::string> warnings;
};

TrainResult train(MultiBranchAutoencoder& model, const ModalityDataset& data);

// Width of the trailing window used for the phase-2 descent check.
inline constexpr std::size_t kLossWindow = 20;

// Index of the first finetune epoch whose trailing-window mean exceeds the
// previous window's mean, if any.
std::optional<std::size_t> first_window_increase(const std::vector<double>& trace,
                                                 std::size_t finetune_begin,
                                                 std::size_t window = kLossWindow);

/// Checkpoint: "MMSCCKPT", u32 version, u64 header length, JSON header, then
/// little-endian float64 blocks in declaration order (parameters, Adam first
/// moments, Adam second moments, loss trace).
void save_checkpoint(const std::filesystem::path& file, MultiBranchAutoencoder& model,
                     const TrainState& state);

struct Checkpoint {
  MultiBranchAutoencoder model;
  TrainState state;
};

Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace mmsc
