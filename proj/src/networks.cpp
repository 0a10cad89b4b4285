#include "mmsc/networks.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mmsc/objectives.hpp"

namespace mmsc {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::drogsure: return "drogsure";
    case Variant::dmsc: return "dmsc";
    case Variant::concat: return "concat";
  }
  return "unknown";
}

Variant variant_from_string(std::string_view s) {
  if (s == "drogsure") return Variant::drogsure;
  if (s == "dmsc") return Variant::dmsc;
  if (s == "concat") return Variant::concat;
  throw ConfigError("unsupported variant '" + std::string(s) + "'");
}

std::vector<LayerSpec> arl_encoder() { return {{5, 3}, {7, 1}, {15, 1}}; }
std::vector<LayerSpec> eyb_encoder() { return {{10, 5}, {20, 3}, {30, 3}}; }

namespace {

void collect_shape_errors(const ModelConfig& c, std::vector<std::string>& errors) {
  if (c.modalities < 1) errors.emplace_back("modalities: must be at least 1");
  if (c.encoder_layers.empty()) errors.emplace_back("encoder_layers: must not be empty");
  for (std::size_t i = 0; i < c.encoder_layers.size(); ++i) {
    const auto& l = c.encoder_layers[i];
    if (l.filters < 1) errors.push_back("encoder_layers[" + std::to_string(i) + "].filters: must be >= 1");
    if (l.kernel % 2 == 0) errors.push_back("encoder_layers[" + std::to_string(i) + "].kernel: must be odd");
  }
  if (c.height < 1 || c.width < 1) errors.emplace_back("height/width: must be positive");
  const auto& h = c.hyper;
  auto nonneg = [&](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) errors.push_back(std::string(name) + ": must be a finite nonnegative number");
  };
  nonneg(h.gamma, "gamma");
  nonneg(h.rho, "rho");
  nonneg(h.mu, "mu");
  nonneg(h.lambda_group, "lambda_group");
  nonneg(h.lambda_comm, "lambda_comm");
  nonneg(h.lambda_frobenius, "lambda_frobenius");
  if (!(h.gamma > 0.0)) errors.emplace_back("gamma: must be positive");
  if (!(h.mu > 0.0)) errors.emplace_back("mu: must be positive");
  if (!(c.learning_rate > 0.0)) errors.emplace_back("learning_rate: must be positive");
  if (!(c.coefficient_init >= 0.0)) errors.emplace_back("coefficient_init: must be nonnegative");
}

[[noreturn]] void throw_errors(const std::vector<std::string>& errors) {
  std::ostringstream os;
  os << "invalid model config:";
  for (const auto& e : errors) os << "\n  " << e;
  throw ConfigError(os.str());
}

}  // namespace

void ModelConfig::validate_shapes() const {
  std::vector<std::string> errors;
  collect_shape_errors(*this, errors);
  if (!errors.empty()) throw_errors(errors);
}

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  collect_shape_errors(*this, errors);
  if (modalities < 2) errors.emplace_back("modalities: need T >= 2");
  if (encoder_layers.size() < 3 || encoder_layers.size() > 6) {
    errors.push_back("encoder_layers: depth " + std::to_string(encoder_layers.size()) + " outside [3, 6]");
  }
  if (!errors.empty()) throw_errors(errors);
}

std::size_t MultiBranchAutoencoder::latent_channels(std::size_t t) const {
  return branches[t].encoder.back().kernel.out_channels;
}

std::size_t MultiBranchAutoencoder::latent_dim(std::size_t t) const {
  return config.height * config.width * latent_channels(t);
}

std::size_t MultiBranchAutoencoder::stacked_channels() const {
  std::size_t c = 0;
  for (std::size_t t = 0; t < branches.size(); ++t) c += latent_channels(t);
  return c;
}

namespace {

ConvLayer make_layer(std::size_t k, std::size_t cin, std::size_t cout, Activation act, std::mt19937_64& rng) {
  ConvLayer layer{ConvKernel(k, cin, cout), {}, act};
  const double fan_in = static_cast<double>(k * k * cin);
  const double fan_out = static_cast<double>(k * k * cout);
  const double s = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-s, s);
  for (double& w : layer.kernel.weights) w = dist(rng);
  return layer;
}

}  // namespace

MultiBranchAutoencoder build_model_unchecked(const ModelConfig& config, std::size_t n) {
  config.validate_shapes();
  if (n < 2) throw ConfigError("build_model: need at least 2 samples, got " + std::to_string(n));

  MultiBranchAutoencoder model;
  model.config = config;
  model.samples = n;
  std::mt19937_64 rng(config.seed);

  const auto& specs = config.encoder_layers;
  const std::size_t depth = specs.size();
  std::vector<std::size_t> channels{1};
  for (const auto& s : specs) channels.push_back(s.filters);
  const std::size_t stacked = config.modalities * channels.back();

  model.branches.resize(config.modalities);
  for (auto& branch : model.branches) {
    for (std::size_t i = 0; i < depth; ++i) {
      branch.encoder.push_back(make_layer(specs[i].kernel, channels[i], channels[i + 1], specs[i].activation, rng));
      branch.encoder.back().bias.assign(channels[i + 1], 0.0);
    }
    // Decoder mirrors the encoder: layer j undoes encoder layer depth-1-j.
    for (std::size_t j = 0; j < depth; ++j) {
      const std::size_t src = depth - 1 - j;
      std::size_t from = channels[src + 1];
      if (j == 0 && config.variant == Variant::concat) from = stacked;
      const Activation act = (j + 1 == depth) ? Activation::identity : Activation::relu;
      branch.decoder.push_back(make_layer(specs[src].kernel, channels[src], from, act, rng));
      branch.decoder.back().bias.assign(channels[src], 0.0);
    }
  }

  const std::size_t count = config.variant == Variant::drogsure ? config.modalities : 1;
  std::uniform_real_distribution<double> wdist(-config.coefficient_init, config.coefficient_init);
  for (std::size_t t = 0; t < count; ++t) {
    Matrix w(n, n);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = wdist(rng);
    }
    w.diagonal().setZero();
    model.coefficients.push_back(std::move(w));
  }
  return model;
}

MultiBranchAutoencoder build_model(const ModelConfig& config, std::size_t n) {
  config.validate();
  return build_model_unchecked(config, n);
}

Gradients zeros_like(const MultiBranchAutoencoder& model) {
  Gradients g;
  g.shared_coefficients = model.shared_coefficients();
  g.branches = model.branches;
  for (auto& b : g.branches) {
    for (auto* layers : {&b.encoder, &b.decoder}) {
      for (auto& l : *layers) {
        std::fill(l.kernel.weights.begin(), l.kernel.weights.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
      }
    }
  }
  for (const auto& w : model.coefficients) g.coefficients.push_back(Matrix::Zero(w.rows(), w.cols()));
  return g;
}

namespace {

template <typename BranchVec, typename MatVec>
std::vector<ParamBlock> blocks_of(BranchVec& branches, MatVec& coefficients, bool shared) {
  std::vector<ParamBlock> out;
  for (std::size_t t = 0; t < branches.size(); ++t) {
    auto& b = branches[t];
    for (std::size_t i = 0; i < b.encoder.size(); ++i) {
      const std::string p = "encoder" + std::to_string(t) + ".layer" + std::to_string(i);
      out.push_back({p + ".weights", b.encoder[i].kernel.weights});
      out.push_back({p + ".bias", b.encoder[i].bias});
    }
    for (std::size_t i = 0; i < b.decoder.size(); ++i) {
      const std::string p = "decoder" + std::to_string(t) + ".layer" + std::to_string(i);
      out.push_back({p + ".weights", b.decoder[i].kernel.weights});
      out.push_back({p + ".bias", b.decoder[i].bias});
    }
  }
  for (std::size_t t = 0; t < coefficients.size(); ++t) {
    auto& w = coefficients[t];
    const std::string name = shared ? "coefficients" : "coefficients" + std::to_string(t);
    out.push_back({name, std::span<double>(w.data(), static_cast<std::size_t>(w.size()))});
  }
  return out;
}

}  // namespace

std::vector<ParamBlock> parameter_blocks(MultiBranchAutoencoder& model) {
  return blocks_of(model.branches, model.coefficients, model.shared_coefficients());
}

std::vector<ParamBlock> parameter_blocks(Gradients& grads) {
  return blocks_of(grads.branches, grads.coefficients, grads.shared_coefficients);
}

FeatureMap as_feature_map(const Matrix& images, std::size_t h, std::size_t w) {
  return unflatten(images, h, w, 1);
}

Matrix self_express(const Matrix& latent, const Matrix& coefficients) {
  if (coefficients.rows() != coefficients.cols()) {
    throw DimensionError("self_express: coefficient matrix is " + std::to_string(coefficients.rows()) + "x" +
                         std::to_string(coefficients.cols()) + ", expected square");
  }
  if (coefficients.rows() != latent.rows()) {
    throw DimensionError("self_express: " + std::to_string(latent.rows()) + " code rows vs coefficient side " +
                         std::to_string(coefficients.rows()));
  }
  for (Eigen::Index i = 0; i < coefficients.rows(); ++i) {
    if (coefficients(i, i) != 0.0) {
      throw InvariantError("self_express: coefficient diagonal entry " + std::to_string(i) + " is nonzero");
    }
  }
  return coefficients.transpose() * latent;
}

FeatureMap stack_to_map(const Matrix& stacked, std::size_t h, std::size_t w,
                        const std::vector<std::size_t>& channels) {
  const std::size_t total = std::accumulate(channels.begin(), channels.end(), std::size_t{0});
  if (static_cast<std::size_t>(stacked.cols()) != h * w * total) {
    throw DimensionError("stack_to_map: width " + std::to_string(stacked.cols()) + " vs " +
                         std::to_string(h * w * total));
  }
  const std::size_t n = static_cast<std::size_t>(stacked.rows());
  FeatureMap map(n, h, w, total);
  std::size_t col0 = 0;
  std::size_t ch0 = 0;
  for (std::size_t c : channels) {
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
          map.values[(b * h * w + p) * total + ch0 + k] =
              stacked(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(col0 + p * c + k));
        }
      }
    }
    col0 += h * w * c;
    ch0 += c;
  }
  return map;
}

Matrix map_to_stack(const FeatureMap& map, const std::vector<std::size_t>& channels) {
  const std::size_t total = std::accumulate(channels.begin(), channels.end(), std::size_t{0});
  if (map.channels != total) throw DimensionError("map_to_stack: channel count mismatch");
  const std::size_t hw = map.height * map.width;
  Matrix stacked(map.batch, hw * total);
  std::size_t col0 = 0;
  std::size_t ch0 = 0;
  for (std::size_t c : channels) {
    for (std::size_t b = 0; b < map.batch; ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
          stacked(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(col0 + p * c + k)) =
              map.values[(b * hw + p) * total + ch0 + k];
        }
      }
    }
    col0 += hw * c;
    ch0 += c;
  }
  return stacked;
}

namespace {

void check_data(const MultiBranchAutoencoder& model, const ModalityDataset& data) {
  if (data.num_modalities() != model.num_modalities()) {
    throw DimensionError("dataset has " + std::to_string(data.num_modalities()) + " modalities, model expects " +
                         std::to_string(model.num_modalities()));
  }
  if (data.height != model.config.height || data.width != model.config.width) {
    throw DimensionError("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                         ", model expects " + std::to_string(model.config.height) + "x" +
                         std::to_string(model.config.width));
  }
  if (data.num_samples() != model.samples) {
    throw DimensionError("dataset has " + std::to_string(data.num_samples()) + " samples, model was built for " +
                         std::to_string(model.samples));
  }
}

void run_encoder(const Branch& branch, const FeatureMap& input, BranchCache& bc) {
  bc.encoder_out.clear();
  const FeatureMap* prev = &input;
  for (const auto& layer : branch.encoder) {
    bc.encoder_out.push_back(conv2d(*prev, layer.kernel, layer.bias, 1, Padding::same, layer.activation));
    prev = &bc.encoder_out.back();
  }
  bc.latent = flatten(bc.encoder_out.back());
}

void run_decoder(const Branch& branch, std::size_t h, std::size_t w, BranchCache& bc) {
  bc.decoder_out.clear();
  const FeatureMap* prev = &bc.decoder_in;
  for (const auto& layer : branch.decoder) {
    bc.decoder_out.push_back(
        conv2d_transpose(*prev, layer.kernel, layer.bias, 1, h, w, Padding::same, layer.activation));
    prev = &bc.decoder_out.back();
  }
}

std::vector<std::size_t> latent_channel_list(const MultiBranchAutoencoder& model) {
  std::vector<std::size_t> c;
  for (std::size_t t = 0; t < model.num_modalities(); ++t) c.push_back(model.latent_channels(t));
  return c;
}

}  // namespace

Matrix ForwardCache::reconstruction(std::size_t t) const { return flatten(branches[t].decoder_out.back()); }

Matrix encode(const MultiBranchAutoencoder& model, std::size_t t, const Matrix& images) {
  if (t >= model.num_modalities()) throw DimensionError("encode: modality index out of range");
  if (static_cast<std::size_t>(images.cols()) != model.config.height * model.config.width) {
    throw DimensionError("encode: image width " + std::to_string(images.cols()) + " does not match model");
  }
  BranchCache bc;
  run_encoder(model.branches[t], as_feature_map(images, model.config.height, model.config.width), bc);
  return bc.latent;
}

void forward_branch(const MultiBranchAutoencoder& model, const ModalityDataset& data, std::size_t t,
                    ForwardCache& cache) {
  if (model.config.variant == Variant::concat) {
    throw InvariantError("forward_branch is not defined for the concat variant");
  }
  const std::size_t h = model.config.height;
  const std::size_t w = model.config.width;
  BranchCache& bc = cache.branches[t];
  run_encoder(model.branches[t], as_feature_map(data.modalities[t], h, w), bc);
  bc.expressed = cache.bypass ? bc.latent : self_express(bc.latent, model.coefficients_for(t));
  bc.decoder_in = unflatten(bc.expressed, h, w, model.latent_channels(t));
  run_decoder(model.branches[t], h, w, bc);
}

ForwardCache forward(const MultiBranchAutoencoder& model, const ModalityDataset& data,
                     bool bypass_self_expression) {
  check_data(model, data);
  ForwardCache cache;
  cache.bypass = bypass_self_expression;
  cache.branches.resize(model.num_modalities());
  const std::size_t T = model.num_modalities();
  if (model.config.variant != Variant::concat) {
    for (std::size_t t = 0; t < T; ++t) forward_branch(model, data, t, cache);
    return cache;
  }

  const std::size_t h = model.config.height;
  const std::size_t w = model.config.width;
  std::size_t width = 0;
  for (std::size_t t = 0; t < T; ++t) {
    run_encoder(model.branches[t], as_feature_map(data.modalities[t], h, w), cache.branches[t]);
    width += static_cast<std::size_t>(cache.branches[t].latent.cols());
  }
  cache.stacked.resize(static_cast<Eigen::Index>(model.samples), static_cast<Eigen::Index>(width));
  Eigen::Index col = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto& l = cache.branches[t].latent;
    cache.stacked.middleCols(col, l.cols()) = l;
    col += l.cols();
  }
  cache.stacked_expressed = bypass_self_expression ? cache.stacked : self_express(cache.stacked, model.coefficients[0]);
  const FeatureMap decoder_in = stack_to_map(cache.stacked_expressed, h, w, latent_channel_list(model));
  for (std::size_t t = 0; t < T; ++t) {
    cache.branches[t].decoder_in = decoder_in;
    run_decoder(model.branches[t], h, w, cache.branches[t]);
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Training

TrainState make_train_state(MultiBranchAutoencoder& model) {
  TrainState state;
  for (const auto& block : parameter_blocks(model)) {
    state.optimizers.emplace_back(block.values.size(), model.config.learning_rate);
  }
  return state;
}

std::optional<std::size_t> first_window_increase(const std::vector<double>& trace, std::size_t finetune_begin,
                                                 std::size_t window) {
  if (window == 0 || trace.size() < finetune_begin + window + 1) return std::nullopt;
  auto mean_ending_at = [&](std::size_t e) {
    double s = 0.0;
    for (std::size_t i = e + 1 - window; i <= e; ++i) s += trace[i];
    return s / static_cast<double>(window);
  };
  double prev = mean_ending_at(finetune_begin + window - 1);
  for (std::size_t e = finetune_begin + window; e < trace.size(); ++e) {
    const double cur = mean_ending_at(e);
    if (cur > prev) return e;
    prev = cur;
  }
  return std::nullopt;
}

namespace {

// Index ranges into parameter_blocks() order.
struct BlockLayout {
  std::vector<std::vector<std::size_t>> encoder;  // per branch
  std::vector<std::vector<std::size_t>> decoder;
  std::vector<std::size_t> coefficients;          // per coefficient matrix
};

BlockLayout layout_of(const MultiBranchAutoencoder& model) {
  BlockLayout lay;
  std::size_t idx = 0;
  for (const auto& b : model.branches) {
    lay.encoder.emplace_back();
    for (std::size_t i = 0; i < 2 * b.encoder.size(); ++i) lay.encoder.back().push_back(idx++);
    lay.decoder.emplace_back();
    for (std::size_t i = 0; i < 2 * b.decoder.size(); ++i) lay.decoder.back().push_back(idx++);
  }
  for (std::size_t t = 0; t < model.coefficients.size(); ++t) lay.coefficients.push_back(idx++);
  return lay;
}

class Trainer {
 public:
  Trainer(MultiBranchAutoencoder& model, const ModalityDataset& data, TrainState& state)
      : model_(model), data_(data), state_(state), layout_(layout_of(model)), grads_(zeros_like(model)) {
    params_ = parameter_blocks(model_);
    grad_blocks_ = parameter_blocks(grads_);
    if (state_.optimizers.size() != params_.size()) {
      throw InvariantError("train state does not match the model's parameter blocks");
    }
  }

  void run() {
    const std::size_t pre = model_.config.pretrain_epochs;
    const std::size_t total = pre + model_.config.finetune_epochs;
    while (state_.epochs_done < total) {
      const std::size_t epoch = state_.epochs_done;
      const double loss = epoch < pre ? pretrain_epoch() : finetune_epoch();
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      }
      state_.loss_trace.push_back(loss);
      ++state_.epochs_done;
    }
    if (auto e = first_window_increase(state_.loss_trace, pre)) {
      const std::string msg = "trailing-window mean loss increased at epoch " + std::to_string(*e);
      if (std::find(state_.warnings.begin(), state_.warnings.end(), msg) == state_.warnings.end()) {
        state_.warnings.push_back(msg);
      }
    }
  }

 private:
  void step(const std::vector<std::size_t>& blocks) {
    for (std::size_t i : blocks) {
      adam_step(params_[i].values, grad_blocks_[i].values, state_.optimizers[i], params_[i].name);
    }
  }

  void step_coefficients(std::size_t k) {
    step({layout_.coefficients[k]});
    model_.coefficients[k].diagonal().setZero();
  }

  double pretrain_epoch() {
    ForwardCache cache = forward(model_, data_, true);
    BackpropRequest req;
    req.coefficients = false;
    backprop(model_, data_, cache, req, grads_);
    for (std::size_t t = 0; t < model_.num_modalities(); ++t) {
      step(layout_.encoder[t]);
      step(layout_.decoder[t]);
    }
    return model_loss(model_, forward(model_, data_, true), data_).total;
  }

  void refresh(std::size_t t) {
    if (!stale_[t]) return;
    forward_branch(model_, data_, t, cache_);
    stale_[t] = false;
  }

  void refresh_all() {
    if (model_.config.variant == Variant::concat) {
      if (std::any_of(stale_.begin(), stale_.end(), [](bool s) { return s; })) {
        cache_ = forward(model_, data_, false);
        std::fill(stale_.begin(), stale_.end(), false);
      }
      return;
    }
    for (std::size_t t = 0; t < stale_.size(); ++t) refresh(t);
  }

  void mark_stale(std::size_t t) {
    if (model_.config.variant == Variant::concat) {
      std::fill(stale_.begin(), stale_.end(), true);
    } else {
      stale_[t] = true;
    }
  }

  double finetune_epoch() {
    const std::size_t T = model_.num_modalities();
    const Variant v = model_.config.variant;
    if (cache_.branches.empty()) {
      cache_ = forward(model_, data_, false);
      stale_.assign(T, false);
    }
    for (std::size_t t = 0; t < T; ++t) {
      // encoder_t
      if (v == Variant::concat) refresh_all(); else refresh(t);
      backprop(model_, data_, cache_, {t, true, false, false}, grads_);
      step(layout_.encoder[t]);
      mark_stale(t);

      // self-expressive block for t
      if (v == Variant::drogsure) {
        refresh(t);
        backprop(model_, data_, cache_, {t, false, false, true}, grads_);
        step_coefficients(t);
        stale_[t] = true;
      } else {
        refresh_all();
        backprop(model_, data_, cache_, {std::nullopt, false, false, true}, grads_);
        step_coefficients(0);
        std::fill(stale_.begin(), stale_.end(), true);
      }

      // decoder_t
      if (v == Variant::concat) refresh_all(); else refresh(t);
      backprop(model_, data_, cache_, {t, false, true, false}, grads_);
      step(layout_.decoder[t]);
      stale_[t] = true;
    }
    refresh_all();
    return model_loss(model_, cache_, data_).total;
  }

  MultiBranchAutoencoder& model_;
  const ModalityDataset& data_;
  TrainState& state_;
  BlockLayout layout_;
  Gradients grads_;
  std::vector<ParamBlock> params_;
  std::vector<ParamBlock> grad_blocks_;
  ForwardCache cache_;
  std::vector<bool> stale_;
};

}  // namespace

void train(MultiBranchAutoencoder& model, const ModalityDataset& data, TrainState& state) {
  check_data(model, data);
  data.validate();
  Trainer(model, data, state).run();
}

TrainResult train(MultiBranchAutoencoder& model, const ModalityDataset& data) {
  TrainState state = make_train_state(model);
  train(model, data, state);
  return {state.loss_trace, state.warnings};
}

}  // namespace mmsc
