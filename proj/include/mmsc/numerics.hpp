#pragma once

// Dense containers and the low-level kernels shared by every other module:
// 2-D convolution and its adjoint, activations, the Adam optimizer and a
// central finite-difference gradient used as a test oracle.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mmsc/errors.hpp"

namespace mmsc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Throws NumericError if any entry of `m` is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);
void require_finite(std::span<const double> values, std::string_view what);

// Row-major copy of a matrix, and back. Used by the on-disk formats.
std::vector<double> to_row_major(const Matrix& m);
Matrix from_row_major(std::span<const double> values, std::size_t rows, std::size_t cols);

/// Activations in NHWC layout: batch, height, width, channels, channels fastest.
struct FeatureMap {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(std::size_t n, std::size_t h, std::size_t w, std::size_t c)
      : batch(n), height(h), width(w), channels(c), values(n * h * w * c, 0.0) {}

  std::size_t size() const { return values.size(); }
  std::size_t sample_size() const { return height * width * channels; }

  double& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
    return values[((b * height + y) * width + x) * channels + c];
  }
  const double& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) const {
    return values[((b * height + y) * width + x) * channels + c];
  }

  bool same_shape(const FeatureMap& o) const {
    return batch == o.batch && height == o.height && width == o.width && channels == o.channels;
  }
};

// One row per sample, each row the sample's (y, x, c) values.
Matrix flatten(const FeatureMap& map);
FeatureMap unflatten(const Matrix& rows, std::size_t h, std::size_t w, std::size_t c);

enum class Activation { relu, identity };
enum class Padding { same, valid };

std::string to_string(Activation a);
Activation activation_from_string(std::string_view s);

/// Convolution weights laid out as [ky][kx][c_in][c_out].
struct ConvKernel {
  std::size_t size = 1;  // spatial extent k (k x k)
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::vector<double> weights;

  ConvKernel() = default;
  ConvKernel(std::size_t k, std::size_t cin, std::size_t cout)
      : size(k), in_channels(cin), out_channels(cout), weights(k * k * cin * cout, 0.0) {}

  double& at(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) {
    return weights[((ky * size + kx) * in_channels + ci) * out_channels + co];
  }
  double at(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) const {
    return weights[((ky * size + kx) * in_channels + ci) * out_channels + co];
  }
};

// Output extent of a convolution along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);
// Leading (top/left) zero padding along one axis.
std::size_t conv_leading_pad(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                             Padding padding);

/// out = act(conv(input, kernel) + bias). Bias is per output channel.
FeatureMap conv2d(const FeatureMap& input, const ConvKernel& kernel, std::span<const double> bias,
                  std::size_t stride = 1, Padding padding = Padding::same,
                  Activation activation = Activation::identity);

/// Adjoint of conv2d with the same kernel: maps c_out channels back to c_in,
/// onto a spatial grid of `out_height` x `out_width`. Bias has c_in entries.
FeatureMap conv2d_transpose(const FeatureMap& input, const ConvKernel& kernel,
                            std::span<const double> bias, std::size_t stride,
                            std::size_t out_height, std::size_t out_width,
                            Padding padding = Padding::same,
                            Activation activation = Activation::identity);

// Gradient building blocks. All are linear and bias-free.
//
// conv_weight_grad(a, g) accumulates dK[ky,kx,ci,co] += sum a[b,iy,ix,ci] * g[b,oy,ox,co]
// over all positions linked by the convolution geometry, where `a` lives on
// the conv input grid and `g` on the conv output grid.
void conv_weight_grad(const FeatureMap& a, const FeatureMap& g, std::size_t stride, Padding padding,
                      ConvKernel& grad);

// Bias-free, activation-free forms of conv2d / conv2d_transpose onto an
// explicit output grid. No shape validation; callers own consistency.
FeatureMap conv2d_linear(const FeatureMap& input, const ConvKernel& kernel, std::size_t out_h,
                         std::size_t out_w, std::size_t stride = 1, Padding padding = Padding::same);
FeatureMap conv2d_transpose_linear(const FeatureMap& input, const ConvKernel& kernel, std::size_t out_h,
                                   std::size_t out_w, std::size_t stride = 1,
                                   Padding padding = Padding::same);

// In-place activation derivative: grad *= act'(output), using the activation
// output (ReLU is differentiable from its output alone).
void apply_activation_grad(const FeatureMap& output, Activation activation, FeatureMap& grad);

// Sum of grad over every position, per channel.
std::vector<double> channel_sums(const FeatureMap& grad);

/// Adam moments for one parameter block.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t size, double lr = 1e-3)
      : first_moment(size, 0.0), second_moment(size, 0.0), learning_rate(lr) {}
};

/// Bias-corrected Adam update in place. Throws NumericError naming `block`
/// on a non-finite gradient (params are left untouched in that case).
void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
               std::string_view block = "parameters");

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central-difference gradient estimate, one coordinate at a time.
std::vector<double> finite_diff_grad(const ScalarFunction& loss, std::span<const double> params,
                                     double h = 1e-5);

}  // namespace mmsc
