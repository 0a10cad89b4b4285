#include "mmsc/numerics.hpp"

#include <cmath>
#include <string>

namespace mmsc {

void require_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) {
    throw NumericError("non-finite value in " + std::string(what));
  }
}

void require_finite(std::span<const double> values, std::string_view what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in " + std::string(what));
    }
  }
}

std::vector<double> to_row_major(const Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      out[k++] = m(i, j);
    }
  }
  return out;
}

Matrix from_row_major(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) {
    throw DimensionError("row-major buffer holds " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[k++];
    }
  }
  return m;
}

Matrix flatten(const FeatureMap& map) {
  return from_row_major(map.values, map.batch, map.sample_size());
}

FeatureMap unflatten(const Matrix& rows, std::size_t h, std::size_t w, std::size_t c) {
  if (static_cast<std::size_t>(rows.cols()) != h * w * c) {
    throw DimensionError("cannot unflatten width " + std::to_string(rows.cols()) + " into " +
                         std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  FeatureMap map(static_cast<std::size_t>(rows.rows()), h, w, c);
  map.values = to_row_major(rows);
  return map;
}

std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
               std::string_view block) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step on " + std::string(block) + ": " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step on " + std::string(block) + ": optimizer state sized for " +
                         std::to_string(state.first_moment.size()) + " params");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw NumericError("non-finite gradient in parameter block " + std::string(block));
    }
  }

  ++state.step;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    params[i] -= state.learning_rate * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

std::vector<double> finite_diff_grad(const ScalarFunction& loss, std::span<const double> params,
                                     double h) {
  if (!(h > 0.0)) {
    throw NumericError("finite-difference step must be positive");
  }
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> grad(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = loss(x);
    x[i] = saved - h;
    const double down = loss(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite loss while differencing coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace mmsc
