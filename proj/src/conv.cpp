#include <algorithm>
#include <string>

#include "mmsc/numerics.hpp"

namespace mmsc {
namespace {

struct Geometry {
  std::size_t in_h, in_w;    // conv input grid
  std::size_t out_h, out_w;  // conv output grid
  std::size_t pad_y, pad_x;
  std::size_t stride;
  std::size_t k;
};

Geometry make_geometry(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                       std::size_t k, std::size_t stride, Padding padding) {
  return Geometry{in_h,
                  in_w,
                  out_h,
                  out_w,
                  conv_leading_pad(in_h, out_h, k, stride, padding),
                  conv_leading_pad(in_w, out_w, k, stride, padding),
                  stride,
                  k};
}

void check_kernel(const ConvKernel& kernel) {
  if (kernel.size == 0 || kernel.size % 2 == 0) {
    throw DimensionError("kernel spatial size must be odd, got " + std::to_string(kernel.size));
  }
  if (kernel.weights.size() != kernel.size * kernel.size * kernel.in_channels * kernel.out_channels) {
    throw DimensionError("kernel weight buffer does not match its declared shape");
  }
  require_finite(kernel.weights, "convolution kernel");
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

bool is_pointwise(const Geometry& g) {
  return g.k == 1 && g.stride == 1 && g.in_h == g.out_h && g.in_w == g.out_w;
}

// Patch matrix: one row per output position (b, oy, ox), columns (ky, kx, ci).
RowMatrix im2col(const FeatureMap& in, const Geometry& g) {
  const std::size_t cin = in.channels;
  RowMatrix patches = RowMatrix::Zero(static_cast<Eigen::Index>(in.batch * g.out_h * g.out_w),
                                      static_cast<Eigen::Index>(g.k * g.k * cin));
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = patches.row(row).data();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_y);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_x);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const double* src = &in.at(b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
            std::copy(src, src + cin, dst + (ky * g.k + kx) * cin);
          }
        }
      }
    }
  }
  return patches;
}

// Adjoint of im2col: adds every patch entry back onto the input grid.
void col2im(const RowMatrix& patches, const Geometry& g, FeatureMap& out) {
  const std::size_t cin = out.channels;
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < out.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = patches.row(row).data();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_y);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_x);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            double* dst = &out.at(b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
            const double* p = src + (ky * g.k + kx) * cin;
            for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += p[ci];
          }
        }
      }
    }
  }
}

ConstRowMap as_rows(const FeatureMap& m) {
  return ConstRowMap(m.values.data(), static_cast<Eigen::Index>(m.batch * m.height * m.width),
                     static_cast<Eigen::Index>(m.channels));
}

RowMap as_rows(FeatureMap& m) {
  return RowMap(m.values.data(), static_cast<Eigen::Index>(m.batch * m.height * m.width),
                static_cast<Eigen::Index>(m.channels));
}

ConstRowMap weight_matrix(const ConvKernel& K) {
  return ConstRowMap(K.weights.data(), static_cast<Eigen::Index>(K.size * K.size * K.in_channels),
                     static_cast<Eigen::Index>(K.out_channels));
}

// out[b, oy, ox, co] += sum in[b, iy, ix, ci] * K[ky, kx, ci, co]
void correlate(const FeatureMap& in, const ConvKernel& K, const Geometry& g, FeatureMap& out) {
  if (is_pointwise(g)) {
    as_rows(out).noalias() += as_rows(in) * weight_matrix(K);
  } else {
    as_rows(out).noalias() += im2col(in, g) * weight_matrix(K);
  }
}

// Adjoint of correlate: out[b, iy, ix, ci] += sum y[b, oy, ox, co] * K[ky, kx, ci, co]
void scatter(const FeatureMap& y, const ConvKernel& K, const Geometry& g, FeatureMap& out) {
  if (is_pointwise(g)) {
    as_rows(out).noalias() += as_rows(y) * weight_matrix(K).transpose();
  } else {
    const RowMatrix patches = as_rows(y) * weight_matrix(K).transpose();
    col2im(patches, g, out);
  }
}

void add_bias_and_activate(FeatureMap& out, std::span<const double> bias, Activation activation) {
  const std::size_t c = out.channels;
  for (std::size_t i = 0; i < out.values.size(); i += c) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double v = out.values[i + ch] + bias[ch];
      if (activation == Activation::relu && v < 0.0) v = 0.0;
      out.values[i + ch] = v;
    }
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw DimensionError("stride must be at least 1");
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (in < kernel) {
    throw DimensionError("valid convolution needs input extent " + std::to_string(in) +
                         " >= kernel " + std::to_string(kernel));
  }
  return (in - kernel) / stride + 1;
}

std::size_t conv_leading_pad(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                             Padding padding) {
  if (padding == Padding::valid) return 0;
  const std::size_t needed = (out - 1) * stride + kernel;
  return needed > in ? (needed - in) / 2 : 0;
}

FeatureMap conv2d(const FeatureMap& input, const ConvKernel& kernel, std::span<const double> bias,
                  std::size_t stride, Padding padding, Activation activation) {
  check_kernel(kernel);
  if (input.channels != kernel.in_channels) {
    throw DimensionError("conv2d: input channels " + std::to_string(input.channels) +
                         " do not match kernel c_in " + std::to_string(kernel.in_channels));
  }
  if (bias.size() != kernel.out_channels) {
    throw DimensionError("conv2d: bias has " + std::to_string(bias.size()) + " entries, kernel c_out is " +
                         std::to_string(kernel.out_channels));
  }
  if (input.values.size() != input.batch * input.sample_size()) {
    throw DimensionError("conv2d: input buffer does not match its declared shape");
  }
  require_finite(input.values, "conv2d input");
  require_finite(bias, "conv2d bias");

  const std::size_t oh = conv_output_extent(input.height, kernel.size, stride, padding);
  const std::size_t ow = conv_output_extent(input.width, kernel.size, stride, padding);
  const Geometry g = make_geometry(input.height, input.width, oh, ow, kernel.size, stride, padding);
  FeatureMap out(input.batch, oh, ow, kernel.out_channels);
  correlate(input, kernel, g, out);
  add_bias_and_activate(out, bias, activation);
  return out;
}

FeatureMap conv2d_transpose(const FeatureMap& input, const ConvKernel& kernel,
                            std::span<const double> bias, std::size_t stride,
                            std::size_t out_height, std::size_t out_width, Padding padding,
                            Activation activation) {
  check_kernel(kernel);
  if (input.channels != kernel.out_channels) {
    throw DimensionError("conv2d_transpose: input channels " + std::to_string(input.channels) +
                         " do not match kernel c_out " + std::to_string(kernel.out_channels));
  }
  if (bias.size() != kernel.in_channels) {
    throw DimensionError("conv2d_transpose: bias has " + std::to_string(bias.size()) +
                         " entries, kernel c_in is " + std::to_string(kernel.in_channels));
  }
  if (conv_output_extent(out_height, kernel.size, stride, padding) != input.height ||
      conv_output_extent(out_width, kernel.size, stride, padding) != input.width) {
    throw DimensionError("conv2d_transpose: output shape " + std::to_string(out_height) + "x" +
                         std::to_string(out_width) + " inconsistent with input " +
                         std::to_string(input.height) + "x" + std::to_string(input.width) +
                         " at stride " + std::to_string(stride));
  }
  require_finite(input.values, "conv2d_transpose input");
  require_finite(bias, "conv2d_transpose bias");

  const Geometry g =
      make_geometry(out_height, out_width, input.height, input.width, kernel.size, stride, padding);
  FeatureMap out(input.batch, out_height, out_width, kernel.in_channels);
  scatter(input, kernel, g, out);
  add_bias_and_activate(out, bias, activation);
  return out;
}

void conv_weight_grad(const FeatureMap& a, const FeatureMap& gmap, std::size_t stride, Padding padding,
                      ConvKernel& grad) {
  if (a.batch != gmap.batch || a.channels != grad.in_channels || gmap.channels != grad.out_channels) {
    throw DimensionError("conv_weight_grad: operand shapes disagree with gradient kernel");
  }
  const Geometry g = make_geometry(a.height, a.width, gmap.height, gmap.width, grad.size, stride, padding);
  RowMap dk(grad.weights.data(), static_cast<Eigen::Index>(grad.size * grad.size * grad.in_channels),
           static_cast<Eigen::Index>(grad.out_channels));
  if (is_pointwise(g)) {
    dk.noalias() += as_rows(a).transpose() * as_rows(gmap);
  } else {
    dk.noalias() += im2col(a, g).transpose() * as_rows(gmap);
  }
}

void apply_activation_grad(const FeatureMap& output, Activation activation, FeatureMap& grad) {
  if (activation == Activation::identity) return;
  for (std::size_t i = 0; i < grad.values.size(); ++i) {
    if (output.values[i] <= 0.0) grad.values[i] = 0.0;
  }
}

std::vector<double> channel_sums(const FeatureMap& grad) {
  std::vector<double> sums(grad.channels, 0.0);
  for (std::size_t i = 0; i < grad.values.size(); i += grad.channels) {
    for (std::size_t c = 0; c < grad.channels; ++c) sums[c] += grad.values[i + c];
  }
  return sums;
}

// Linear (bias-free) helpers exposed for backprop through the encoder/decoder.
FeatureMap conv2d_linear(const FeatureMap& input, const ConvKernel& kernel, std::size_t out_h,
                         std::size_t out_w, std::size_t stride, Padding padding) {
  const Geometry g = make_geometry(input.height, input.width, out_h, out_w, kernel.size, stride, padding);
  FeatureMap out(input.batch, out_h, out_w, kernel.out_channels);
  correlate(input, kernel, g, out);
  return out;
}

FeatureMap conv2d_transpose_linear(const FeatureMap& input, const ConvKernel& kernel, std::size_t out_h,
                                   std::size_t out_w, std::size_t stride, Padding padding) {
  const Geometry g = make_geometry(out_h, out_w, input.height, input.width, kernel.size, stride, padding);
  FeatureMap out(input.batch, out_h, out_w, kernel.in_channels);
  scatter(input, kernel, g, out);
  return out;
}

}  // namespace mmsc
