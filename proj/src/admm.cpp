#include "mmsc/admm.hpp"

#include <cmath>
#include <random>
#include <string>

#include "mmsc/objectives.hpp"

namespace mmsc {

std::vector<Matrix> prox_group(std::span<const Matrix> group, double beta) {
  if (beta < 0.0) throw DimensionError("prox_group: threshold must be nonnegative");
  std::vector<Matrix> out(group.begin(), group.end());
  if (out.empty()) return out;
  const Eigen::Index rows = out.front().rows(), cols = out.front().cols();
  for (const auto& w : out) {
    if (w.rows() != rows || w.cols() != cols) throw DimensionError("prox_group: shapes differ");
  }
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      double g2 = 0.0;
      for (const auto& w : out) g2 += w(i, j) * w(i, j);
      const double g = std::sqrt(g2);
      const double factor = g > 0.0 ? std::max(g - beta, 0.0) / g : 0.0;
      for (auto& w : out) w(i, j) *= factor;
    }
  }
  for (auto& w : out) w.diagonal().setZero();
  return out;
}

Matrix shrink_l1(const Matrix& b, double tau) {
  if (tau < 0.0) throw DimensionError("shrink_l1: threshold must be nonnegative");
  return b.unaryExpr([tau](double x) {
    const double m = std::max(std::abs(x) - tau, 0.0);
    return x > 0.0 ? m : (x < 0.0 ? -m : 0.0);
  });
}

double spectral_norm_sq(const Matrix& m, std::size_t iterations, std::uint64_t seed) {
  if (m.size() == 0) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vector v = Vector::NullaryExpr(m.cols(), [&] { return normal(rng); });
  double estimate = 0.0;
  for (std::size_t k = 0; k < iterations; ++k) {
    const double norm = v.norm();
    if (norm == 0.0) return 0.0;
    v /= norm;
    Vector next = m.transpose() * (m * v);
    estimate = v.dot(next);
    v = std::move(next);
  }
  return estimate;
}

AdmmState admm_init(std::span<const Matrix> features, const AdmmConfig& config) {
  if (features.empty()) throw DimensionError("admm: no modalities");
  const Eigen::Index n = features.front().rows();
  for (const auto& l : features) {
    if (l.rows() != n) throw DimensionError("admm: modalities disagree on the number of samples");
    require_finite(l, "admm features");
  }
  if (!(config.growth > 1.0)) throw ConfigError("admm: growth must exceed 1");
  if (!(config.mu0 > 0.0)) throw ConfigError("admm: mu0 must be positive");

  AdmmState s;
  s.features.assign(features.begin(), features.end());
  s.mu = config.mu0;
  s.growth = config.growth;
  s.rho = config.rho;
  s.lambda_group = config.lambda_group;
  s.lambda_comm = config.lambda_comm;
  s.refine_features = config.refine_features;

  double bound = 0.0;
  for (const auto& l : features) bound = std::max(bound, spectral_norm_sq(l));
  s.eta = config.eta ? *config.eta : config.eta_scale * bound;
  if (!(s.eta > 0.0)) throw NumericError("admm: step scale eta1 must be positive (all features zero?)");

  for (const auto& l : features) {
    Matrix w = Matrix::Zero(n, n);
    if (config.warm_start) {
      // W solving min ||Lc - Lc W||^2 + 1e-3 ||W||^2
      const Matrix gram = l * l.transpose();
      w = (gram + 1e-3 * Matrix::Identity(n, n)).ldlt().solve(gram);
      w.diagonal().setZero();
    }
    s.omega.push_back(std::move(w));
    s.multipliers.push_back(Matrix::Zero(l.cols(), n));
  }
  return s;
}

void admm_iterate(AdmmState& s) {
  const std::size_t T = s.omega.size();
  const Eigen::Index n = s.omega.front().rows();
  const double step = 1.0 / (s.mu * s.eta);

  std::vector<Matrix> half(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Matrix lc = s.features[t].transpose();
    const Matrix w_hat = Matrix::Identity(n, n) - s.omega[t];
    half[t] = s.omega[t] + lc.transpose() * (lc * w_hat - s.multipliers[t] / s.mu) / s.eta;
    if (T > 1 && s.lambda_comm != 0.0) {
      half[t] -= s.lambda_comm * step * commutator_penalty_grad(s.omega, t);
    }
    // shrinkage maps NaN to zero, so the check has to happen before it
    if (!half[t].allFinite()) {
      throw NumericError("admm diverged at iteration " + std::to_string(s.iteration + 1));
    }
  }
  std::vector<Matrix> next = prox_group(half, s.lambda_group * s.rho * step);
  for (auto& w : next) {
    w = shrink_l1(w, s.rho * step);
    w.diagonal().setZero();
  }

  for (std::size_t t = 0; t < T; ++t) {
    if (!next[t].allFinite()) {
      throw NumericError("admm diverged at iteration " + std::to_string(s.iteration + 1));
    }
  }
  s.omega = std::move(next);

  for (std::size_t t = 0; t < T; ++t) {
    Matrix lc = s.features[t].transpose();
    const Matrix w_hat = Matrix::Identity(n, n) - s.omega[t];
    if (s.refine_features) {
      // gradient step on the augmented terms in L, step 1/(mu ||W_hat||^2)
      const double lip = std::max(spectral_norm_sq(w_hat, 50), 1e-12);
      lc -= (lc * w_hat - s.multipliers[t] / s.mu) * w_hat.transpose() / lip;
      if (!lc.allFinite()) {
        throw NumericError("admm diverged at iteration " + std::to_string(s.iteration + 1));
      }
      s.features[t] = lc.transpose();
    }
    s.multipliers[t] += s.mu * (lc * s.omega[t] - lc);
  }
  s.mu *= s.growth;
  ++s.iteration;
}

std::vector<double> selfexpr_residuals(const AdmmState& s) {
  std::vector<double> out;
  for (std::size_t t = 0; t < s.omega.size(); ++t) {
    out.push_back((s.features[t] - s.omega[t].transpose() * s.features[t]).norm());
  }
  return out;
}

namespace {

double max_relative(const AdmmState& s, const std::vector<double>& residuals) {
  double worst = 0.0;
  for (std::size_t t = 0; t < residuals.size(); ++t) {
    const double norm = s.features[t].norm();
    worst = std::max(worst, norm > 0.0 ? residuals[t] / norm : residuals[t]);
  }
  return worst;
}

}  // namespace

AdmmReport admm_run(std::span<const Matrix> features, const AdmmConfig& config) {
  AdmmState s = admm_init(features, config);
  AdmmReport report;
  double rel = max_relative(s, selfexpr_residuals(s));
  while (report.iterations < config.max_iterations && !(rel < config.tol)) {
    admm_iterate(s);
    ++report.iterations;
    auto res = selfexpr_residuals(s);
    rel = max_relative(s, res);
    report.residuals.push_back(std::move(res));
    report.max_relative_residual.push_back(rel);
    report.commutator_trace.push_back(commutator_penalty(s.omega));
  }
  report.omega = std::move(s.omega);
  report.features = std::move(s.features);
  return report;
}

}  // namespace mmsc
