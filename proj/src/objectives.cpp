#include "mmsc/objectives.hpp"

#include <random>

#include <cmath>
#include <string>

namespace mmsc {

double combine(const LossBreakdown& t, const Hyperparameters& h) {
  return h.lambda_comm * t.commutator_term + h.lambda_group * t.group_term + 0.5 * h.gamma * t.recon_term +
         h.rho * t.l1_term + 0.5 * h.mu * t.selfexpr_term + h.lambda_frobenius * t.frobenius_term;
}

namespace {

void check_group(std::span<const Matrix> group) {
  for (const auto& w : group) {
    if (w.rows() != w.cols() || w.rows() != group.front().rows()) {
      throw DimensionError("coefficient group members must be square with a common side");
    }
  }
}

void check_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term: ") + name);
}

LossBreakdown finish(LossBreakdown b, const Hyperparameters& h) {
  check_term(b.commutator_term, "commutator_term");
  check_term(b.group_term, "group_term");
  check_term(b.recon_term, "recon_term");
  check_term(b.l1_term, "l1_term");
  check_term(b.selfexpr_term, "selfexpr_term");
  check_term(b.frobenius_term, "frobenius_term");
  b.total = combine(b, h);
  return b;
}

double recon_sum(const ForwardCache& cache, const ModalityDataset& data) {
  double s = 0.0;
  for (std::size_t t = 0; t < data.num_modalities(); ++t) {
    const auto& out = cache.branches[t].decoder_out.back().values;
    const Matrix& x = data.modalities[t];
    const std::size_t cols = static_cast<std::size_t>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double d = x(i, j) - out[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(j)];
        s += d * d;
      }
    }
  }
  return s;
}

}  // namespace

double group_l12_norm(std::span<const Matrix> group) {
  if (group.empty()) return 0.0;
  check_group(group);
  const Eigen::Index n = group.front().rows();
  double total = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < n; ++k) {
      double s = 0.0;
      for (const auto& w : group) s += w(k, j) * w(k, j);
      total += std::sqrt(s);
    }
  }
  return total;
}

Matrix commutator(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("commutator: operands must be square and equally sized");
  }
  return a * b - b * a;
}

double commutator_penalty(std::span<const Matrix> group) {
  if (group.size() < 2) return 0.0;
  check_group(group);
  double total = 0.0;
  for (std::size_t a = 0; a < group.size(); ++a) {
    for (std::size_t b = a + 1; b < group.size(); ++b) {
      total += commutator(group[a], group[b]).squaredNorm();
    }
  }
  return 2.0 * total;  // ordered pairs
}

Matrix commutator_penalty_grad(std::span<const Matrix> group, std::size_t t) {
  const Matrix& wt = group[t];
  Matrix g = Matrix::Zero(wt.rows(), wt.cols());
  for (std::size_t m = 0; m < group.size(); ++m) {
    if (m == t) continue;
    const Matrix& wm = group[m];
    const Matrix c = wt * wm - wm * wt;
    g.noalias() += c * wm.transpose();
    g.noalias() -= wm.transpose() * c;
  }
  return 4.0 * g;
}

Matrix group_norm_grad(std::span<const Matrix> group, std::size_t t) {
  const Matrix& wt = group[t];
  Matrix g(wt.rows(), wt.cols());
  for (Eigen::Index j = 0; j < wt.cols(); ++j) {
    for (Eigen::Index i = 0; i < wt.rows(); ++i) {
      double s = 0.0;
      for (const auto& w : group) s += w(i, j) * w(i, j);
      g(i, j) = s > 0.0 ? wt(i, j) / std::sqrt(s) : 0.0;
    }
  }
  return g;
}

Matrix l1_grad(const Matrix& w) {
  return w.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

LossBreakdown drogsure_loss(const ForwardCache& cache, std::span<const Matrix> omega, const ModalityDataset& data,
                            const Hyperparameters& hyper) {
  if (omega.size() != data.num_modalities() || cache.branches.size() != data.num_modalities()) {
    throw DimensionError("drogsure_loss: need one coefficient matrix and one cache branch per modality");
  }
  check_group(omega);
  LossBreakdown b;
  b.recon_term = recon_sum(cache, data);
  for (std::size_t t = 0; t < omega.size(); ++t) {
    const Matrix& l = cache.branches[t].latent;
    b.selfexpr_term += (l - omega[t].transpose() * l).squaredNorm();
    b.l1_term += omega[t].cwiseAbs().sum();
  }
  b.group_term = group_l12_norm(omega);
  b.commutator_term = commutator_penalty(omega);
  return finish(b, hyper);
}

LossBreakdown dmsc_loss(const ForwardCache& cache, const Matrix& w, const ModalityDataset& data,
                        const Hyperparameters& hyper) {
  if (cache.branches.size() != data.num_modalities()) {
    throw DimensionError("dmsc_loss: cache and dataset disagree on modality count");
  }
  LossBreakdown b;
  b.recon_term = recon_sum(cache, data);
  for (const auto& bc : cache.branches) {
    b.selfexpr_term += (bc.latent - w.transpose() * bc.latent).squaredNorm();
  }
  b.frobenius_term = w.norm();
  return finish(b, hyper);
}

LossBreakdown concat_loss(const ForwardCache& cache, const Matrix& w, const ModalityDataset& data,
                          const Hyperparameters& hyper) {
  if (cache.branches.size() != data.num_modalities()) {
    throw DimensionError("concat_loss: cache and dataset disagree on modality count");
  }
  LossBreakdown b;
  b.recon_term = recon_sum(cache, data);
  b.selfexpr_term = (cache.stacked - w.transpose() * cache.stacked).squaredNorm();
  b.l1_term = w.cwiseAbs().sum();
  return finish(b, hyper);
}

LossBreakdown reconstruction_loss(const ForwardCache& cache, const ModalityDataset& data,
                                  const Hyperparameters& hyper) {
  LossBreakdown b;
  b.recon_term = recon_sum(cache, data);
  return finish(b, hyper);
}

LossBreakdown model_loss(const MultiBranchAutoencoder& model, const ForwardCache& cache,
                         const ModalityDataset& data) {
  const auto& h = model.config.hyper;
  if (cache.bypass) return reconstruction_loss(cache, data, h);
  switch (model.config.variant) {
    case Variant::drogsure: return drogsure_loss(cache, model.coefficients, data, h);
    case Variant::dmsc: return dmsc_loss(cache, model.coefficients.front(), data, h);
    case Variant::concat: return concat_loss(cache, model.coefficients.front(), data, h);
  }
  throw ConfigError("unsupported variant");
}

// ---------------------------------------------------------------------------
// Backpropagation

namespace {

void zero_layers(std::vector<ConvLayer>& layers) {
  for (auto& l : layers) {
    std::fill(l.kernel.weights.begin(), l.kernel.weights.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

// Gradient w.r.t. the decoder input, given dLoss/dReconstruction. Fills
// decoder parameter gradients when `grads` is non-null.
FeatureMap decoder_backward(const Branch& branch, const BranchCache& bc, FeatureMap g,
                            std::vector<ConvLayer>* grads) {
  const std::size_t depth = branch.decoder.size();
  for (std::size_t i = depth; i-- > 0;) {
    const ConvLayer& layer = branch.decoder[i];
    apply_activation_grad(bc.decoder_out[i], layer.activation, g);
    const FeatureMap& in = i == 0 ? bc.decoder_in : bc.decoder_out[i - 1];
    if (grads) {
      ConvLayer& gl = (*grads)[i];
      // Output lives on the conv-input grid, input on the conv-output grid.
      conv_weight_grad(g, in, 1, Padding::same, gl.kernel);
      const auto sums = channel_sums(g);
      for (std::size_t c = 0; c < sums.size(); ++c) gl.bias[c] += sums[c];
    }
    g = conv2d_linear(g, layer.kernel, in.height, in.width, 1, Padding::same);
  }
  return g;
}

void encoder_backward(const Branch& branch, const BranchCache& bc, const FeatureMap& input, FeatureMap g,
                      std::vector<ConvLayer>& grads) {
  const std::size_t depth = branch.encoder.size();
  for (std::size_t i = depth; i-- > 0;) {
    const ConvLayer& layer = branch.encoder[i];
    apply_activation_grad(bc.encoder_out[i], layer.activation, g);
    const FeatureMap& in = i == 0 ? input : bc.encoder_out[i - 1];
    conv_weight_grad(in, g, 1, Padding::same, grads[i].kernel);
    const auto sums = channel_sums(g);
    for (std::size_t c = 0; c < sums.size(); ++c) grads[i].bias[c] += sums[c];
    if (i > 0) g = conv2d_transpose_linear(g, layer.kernel, in.height, in.width, 1, Padding::same);
  }
}

FeatureMap recon_grad(const BranchCache& bc, const Matrix& x, double gamma) {
  FeatureMap g = bc.decoder_out.back();
  const std::size_t cols = static_cast<std::size_t>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double& v = g.values[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(j)];
      v = gamma * (v - x(i, j));
    }
  }
  return g;
}

void add_coefficient_terms(const MultiBranchAutoencoder& model, std::size_t k, Matrix& g) {
  const auto& h = model.config.hyper;
  const auto& omega = model.coefficients;
  switch (model.config.variant) {
    case Variant::drogsure:
      if (h.lambda_comm != 0.0 && omega.size() > 1) g.noalias() += h.lambda_comm * commutator_penalty_grad(omega, k);
      if (h.lambda_group != 0.0) g.noalias() += h.lambda_group * group_norm_grad(omega, k);
      if (h.rho != 0.0) g.noalias() += h.rho * l1_grad(omega[k]);
      break;
    case Variant::dmsc: {
      const double norm = omega[k].norm();
      if (h.lambda_frobenius != 0.0 && norm > 0.0) g.noalias() += (h.lambda_frobenius / norm) * omega[k];
      break;
    }
    case Variant::concat:
      if (h.rho != 0.0) g.noalias() += h.rho * l1_grad(omega[k]);
      break;
  }
}

}  // namespace

void backprop(const MultiBranchAutoencoder& model, const ModalityDataset& data, const ForwardCache& cache,
              const BackpropRequest& req, Gradients& grads) {
  const std::size_t T = model.num_modalities();
  const auto& h = model.config.hyper;
  const std::size_t height = model.config.height;
  const std::size_t width = model.config.width;
  const bool bypass = cache.bypass;
  const bool want_coeff = req.coefficients && !bypass;
  auto in_scope = [&](std::size_t t) { return !req.branch || *req.branch == t; };

  for (std::size_t t = 0; t < T; ++t) {
    if (!in_scope(t)) continue;
    if (req.encoders) zero_layers(grads.branches[t].encoder);
    if (req.decoders) zero_layers(grads.branches[t].decoder);
  }
  if (want_coeff) {
    for (std::size_t k = 0; k < grads.coefficients.size(); ++k) {
      if (model.shared_coefficients() || in_scope(k)) grads.coefficients[k].setZero();
    }
  }

  if (model.config.variant != Variant::concat) {
    for (std::size_t t = 0; t < T; ++t) {
      const bool params_t = in_scope(t) && (req.encoders || req.decoders);
      const bool coeff_t = want_coeff && (model.shared_coefficients() || in_scope(t));
      if (!params_t && !coeff_t) continue;

      const BranchCache& bc = cache.branches[t];
      const FeatureMap gz_map =
          decoder_backward(model.branches[t], bc, recon_grad(bc, data.modalities[t], h.gamma),
                           in_scope(t) && req.decoders ? &grads.branches[t].decoder : nullptr);
      const bool need_encoder = in_scope(t) && req.encoders;
      if (!need_encoder && !coeff_t) continue;

      Matrix gz = flatten(gz_map);
      Matrix gl;
      if (bypass) {
        gl = std::move(gz);
      } else {
        const Matrix& w = model.coefficients_for(t);
        const Matrix e = bc.latent - bc.expressed;
        gz.noalias() -= h.mu * e;
        if (coeff_t) {
          Matrix& gw = grads.coefficients[model.shared_coefficients() ? 0 : t];
          gw.noalias() += bc.latent * gz.transpose();
        }
        if (need_encoder) {
          gl = h.mu * e;
          gl.noalias() += w * gz;
        }
      }
      if (need_encoder) {
        encoder_backward(model.branches[t], bc, as_feature_map(data.modalities[t], height, width),
                         unflatten(gl, height, width, model.latent_channels(t)), grads.branches[t].encoder);
      }
    }
    if (want_coeff) {
      for (std::size_t k = 0; k < model.coefficients.size(); ++k) {
        if (model.shared_coefficients() || in_scope(k)) add_coefficient_terms(model, k, grads.coefficients[k]);
      }
    }
    return;
  }

  // concat: every decoder reads the full self-expressed stack.
  std::vector<std::size_t> channels;
  for (std::size_t t = 0; t < T; ++t) channels.push_back(model.latent_channels(t));
  Matrix gz = Matrix::Zero(cache.stacked.rows(), cache.stacked.cols());
  for (std::size_t t = 0; t < T; ++t) {
    const BranchCache& bc = cache.branches[t];
    const FeatureMap g = decoder_backward(model.branches[t], bc, recon_grad(bc, data.modalities[t], h.gamma),
                                          in_scope(t) && req.decoders ? &grads.branches[t].decoder : nullptr);
    gz += map_to_stack(g, channels);
  }
  bool any_encoder = false;
  for (std::size_t t = 0; t < T; ++t) any_encoder = any_encoder || (in_scope(t) && req.encoders);
  if (!any_encoder && !want_coeff) return;

  Matrix gn;
  if (bypass) {
    gn = std::move(gz);
  } else {
    const Matrix& w = model.coefficients.front();
    const Matrix e = cache.stacked - cache.stacked_expressed;
    gz.noalias() -= h.mu * e;
    if (want_coeff) {
      grads.coefficients.front().noalias() += cache.stacked * gz.transpose();
      add_coefficient_terms(model, 0, grads.coefficients.front());
    }
    if (any_encoder) {
      gn = h.mu * e;
      gn.noalias() += w * gz;
    }
  }
  if (!any_encoder) return;
  Eigen::Index col = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const Eigen::Index d = cache.branches[t].latent.cols();
    if (in_scope(t) && req.encoders) {
      const Matrix gl = gn.middleCols(col, d);
      encoder_backward(model.branches[t], cache.branches[t], as_feature_map(data.modalities[t], height, width),
                       unflatten(gl, height, width, channels[t]), grads.branches[t].encoder);
    }
    col += d;
  }
}

Gradients backprop(const MultiBranchAutoencoder& model, const ModalityDataset& data, bool bypass_self_expression) {
  Gradients g = zeros_like(model);
  const ForwardCache cache = forward(model, data, bypass_self_expression);
  backprop(model, data, cache, BackpropRequest{}, g);
  return g;
}

std::vector<GradCheckEntry> gradient_check(MultiBranchAutoencoder& model, const ModalityDataset& data,
                                           const GradCheckOptions& options) {
  Gradients grads = backprop(model, data, options.bypass_self_expression);
  auto params = parameter_blocks(model);
  auto analytic = parameter_blocks(grads);
  const std::size_t n = model.samples;
  auto loss = [&] {
    return model_loss(model, forward(model, data, options.bypass_self_expression), data).total;
  };

  std::vector<GradCheckEntry> out;
  for (std::size_t b = 0; b < params.size(); ++b) {
    const bool coefficient = params[b].name.rfind("coefficients", 0) == 0;
    if (coefficient && options.bypass_self_expression) continue;
    GradCheckEntry e;
    e.block = params[b].name;
    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t i = 0; i < params[b].values.size(); ++i) {
      // coefficient blocks are column-major n x n; the diagonal is pinned to zero
      if (coefficient && i % n == i / n) continue;
      double a = analytic[b].values[i];
      if (options.inject_bug && *options.inject_bug == e.block && e.coordinates == 0) a = 2.0 * a + 1.0;
      double& p = params[b].values[i];
      const double saved = p;
      p = saved + options.step;
      const double up = loss();
      p = saved - options.step;
      const double down = loss();
      p = saved;
      const double f = (up - down) / (2.0 * options.step);
      diff2 += (a - f) * (a - f);
      a2 += a * a;
      f2 += f * f;
      e.max_abs_error = std::max(e.max_abs_error, std::abs(a - f));
      ++e.coordinates;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(f2), 1e-10});
    e.rel_error = std::sqrt(diff2) / scale;
    e.passed = e.rel_error <= options.tolerance;
    out.push_back(e);
  }
  return out;
}

GradCheckToy make_gradcheck_toy(Variant variant, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.modalities = 2;
  cfg.height = cfg.width = 6;
  cfg.encoder_layers = {{3, 3}, {2, 1}};
  cfg.seed = seed;
  // every term active so each contributes to the checked gradient
  cfg.hyper = {1.0, 0.05, 0.7, 0.3, 0.2, 0.4};
  GradCheckToy toy;
  toy.model = build_model_unchecked(cfg, 4);
  std::mt19937_64 rng(seed + 17);
  std::uniform_real_distribution<double> unit(0.0, 1.0), coef(-0.5, 0.5);
  // nonzero biases keep ReLU inputs off the kink where dead channels would sit at exactly 0
  for (auto& b : toy.model.branches) {
    for (auto* layers : {&b.encoder, &b.decoder})
      for (auto& l : *layers)
        for (auto& v : l.bias) v = 0.2 * coef(rng);
  }
  for (auto& w : toy.model.coefficients) {
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = i == j ? 0.0 : coef(rng);
  }
  toy.data.height = toy.data.width = 6;
  for (std::size_t t = 0; t < 2; ++t) {
    Matrix x(4, 36);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = unit(rng);
    toy.data.modalities.push_back(std::move(x));
  }
  return toy;
}

}  // namespace mmsc
