#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "mmsc/errors.hpp"
#include "mmsc/numerics.hpp"
#include "oracles.hpp"

using namespace mmsc;

namespace {

double max_abs_diff(const FeatureMap& a, const FeatureMap& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

double dot(const FeatureMap& a, const FeatureMap& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d matches the direct-sum oracle on random instances") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> side(3, 7), ch(1, 3), ks(1, 3), st(1, 2), coin(0, 1);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t k = 2 * ks(rng) - 1, stride = st(rng);
    const bool same = coin(rng) || k > 3;
    const std::size_t h = std::max(side(rng), k), w = std::max(side(rng), k);
    const FeatureMap x = oracle::random_map(rng, 2, h, w, ch(rng));
    const ConvKernel K = oracle::random_kernel(rng, k, x.channels, ch(rng));
    std::vector<double> bias(K.out_channels);
    for (auto& b : bias) b = std::uniform_real_distribution<double>(-1, 1)(rng);
    const bool relu = coin(rng);
    const auto got = conv2d(x, K, bias, stride, same ? Padding::same : Padding::valid,
                            relu ? Activation::relu : Activation::identity);
    const auto want = oracle::conv2d(x, K, bias, stride, same, relu);
    CHECK(max_abs_diff(got, want) <= 1e-10);
  }
}

TEST_CASE("conv2d_transpose matches the scatter oracle and is the adjoint of conv2d") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> side(3, 7), ch(1, 3), ks(1, 3), st(1, 2);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t k = 2 * ks(rng) - 1, stride = st(rng);
    const std::size_t h = side(rng), w = side(rng);
    const ConvKernel K = oracle::random_kernel(rng, k, ch(rng), ch(rng));
    const std::size_t oh = conv_output_extent(h, k, stride, Padding::same);
    const std::size_t ow = conv_output_extent(w, k, stride, Padding::same);
    const FeatureMap y = oracle::random_map(rng, 2, oh, ow, K.out_channels);
    const std::vector<double> zero(K.in_channels, 0.0);
    const auto got = conv2d_transpose(y, K, zero, stride, h, w, Padding::same, Activation::identity);
    CHECK(max_abs_diff(got, oracle::conv2d_transpose(y, K, {}, stride, h, w, true, false)) <= 1e-10);

    // <conv(x), y> == <x, conv^T(y)>
    const FeatureMap x = oracle::random_map(rng, 2, h, w, K.in_channels);
    const std::vector<double> zero_out(K.out_channels, 0.0);
    const auto cx = conv2d(x, K, zero_out, stride, Padding::same, Activation::identity);
    CHECK(dot(cx, y) == doctest::Approx(dot(x, got)).epsilon(1e-12));
  }
}

TEST_CASE("conv2d examples") {
  SUBCASE("1x1 kernel with unit weight is the identity") {
    std::mt19937_64 rng(1);
    const FeatureMap x = oracle::random_map(rng, 1, 4, 4, 1);
    ConvKernel K(1, 1, 1);
    K.weights[0] = 1.0;
    const std::vector<double> bias{0.0};
    CHECK(max_abs_diff(conv2d(x, K, bias), x) == 0.0);
  }
  SUBCASE("3x3 box filter on ones, same padding") {
    FeatureMap x(1, 3, 3, 1);
    std::fill(x.values.begin(), x.values.end(), 1.0);
    ConvKernel K(3, 1, 1);
    std::fill(K.weights.begin(), K.weights.end(), 1.0);
    const std::vector<double> bias{0.0};
    const auto y = conv2d(x, K, bias);
    CHECK(y.at(0, 1, 1, 0) == 9.0);  // interior sees all nine
    CHECK(y.at(0, 0, 0, 0) == 4.0);  // corner sees four
    CHECK(y.at(0, 0, 1, 0) == 6.0);  // edge sees six
  }
  SUBCASE("shape errors") {
    FeatureMap x(1, 4, 4, 2);
    ConvKernel K(3, 1, 1);
    const std::vector<double> bias{0.0};
    CHECK_THROWS_AS(conv2d(x, K, bias), DimensionError);
    FeatureMap x1(1, 4, 4, 1);
    const std::vector<double> bad_bias{0.0, 0.0};
    CHECK_THROWS_AS(conv2d(x1, K, bad_bias), DimensionError);
  }
  SUBCASE("non-finite input is rejected") {
    FeatureMap x(1, 3, 3, 1);
    x.values[4] = std::numeric_limits<double>::quiet_NaN();
    ConvKernel K(1, 1, 1);
    const std::vector<double> bias{0.0};
    CHECK_THROWS_AS(conv2d(x, K, bias), NumericError);
  }
}

TEST_CASE("conv_weight_grad is the gradient of <conv(a), g> in the kernel") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = trial % 2 ? 3 : 1, stride = 1 + trial % 2;
    const FeatureMap a = oracle::random_map(rng, 2, 5, 6, 2);
    ConvKernel K = oracle::random_kernel(rng, k, 2, 3);
    const FeatureMap g = oracle::random_map(rng, 2, conv_output_extent(5, k, stride, Padding::same),
                                            conv_output_extent(6, k, stride, Padding::same), 3);
    ConvKernel grad(k, 2, 3);
    conv_weight_grad(a, g, stride, Padding::same, grad);
    // the objective is linear in K, so each partial derivative is a unit-kernel response
    for (std::size_t i = 0; i < K.weights.size(); ++i) {
      ConvKernel unit(k, 2, 3);
      unit.weights[i] = 1.0;
      const std::vector<double> zero(3, 0.0);
      const double d = dot(conv2d(a, unit, zero, stride, Padding::same, Activation::identity), g);
      CHECK(grad.weights[i] == doctest::Approx(d).epsilon(1e-12));
    }
  }
}

TEST_CASE("adam_step follows the bias-corrected update") {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, -1.0};
  OptimizerState s(2, 0.1);
  adam_step(p, g, s);
  // first step: m_hat = g, v_hat = g^2, so the step is lr * sign(g) up to epsilon
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 1.0 / (1.0 + 1e-8)).epsilon(1e-14));

  // second step against a hand-rolled recurrence
  const std::vector<double> g2{0.25, 0.5};
  adam_step(p, g2, s);
  const double m = 0.9 * (0.1 * 0.5) + 0.1 * 0.25, v = 0.999 * (0.001 * 0.25) + 0.001 * 0.0625;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));
  CHECK(s.step == 2);

  SUBCASE("non-finite gradient leaves parameters untouched") {
    std::vector<double> q{1.0};
    const std::vector<double> bad{std::numeric_limits<double>::infinity()};
    OptimizerState t(1);
    CHECK_THROWS_AS(adam_step(q, bad, t, "block"), NumericError);
    CHECK(q[0] == 1.0);
  }
}

TEST_CASE("finite_diff_grad recovers a quadratic gradient") {
  const std::vector<double> x{0.3, -1.2, 2.0};
  auto f = [](std::span<const double> v) { return v[0] * v[0] + 3 * v[0] * v[1] + std::sin(v[2]); };
  const auto g = finite_diff_grad(f, x);
  CHECK(g[0] == doctest::Approx(2 * 0.3 + 3 * -1.2).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(3 * 0.3).epsilon(1e-8));
  CHECK(g[2] == doctest::Approx(std::cos(2.0)).epsilon(1e-8));
}

TEST_CASE("flatten and unflatten are inverse") {
  std::mt19937_64 rng(3);
  const FeatureMap m = oracle::random_map(rng, 3, 4, 5, 2);
  const Matrix rows = flatten(m);
  CHECK(rows.rows() == 3);
  CHECK(rows.cols() == 40);
  CHECK(max_abs_diff(unflatten(rows, 4, 5, 2), m) == 0.0);
}

TEST_CASE("relu gradient masks by output") {
  FeatureMap out(1, 1, 2, 1);
  out.values = {0.0, 2.0};
  FeatureMap g(1, 1, 2, 1);
  g.values = {5.0, 7.0};
  apply_activation_grad(out, Activation::relu, g);
  CHECK(g.values[0] == 0.0);
  CHECK(g.values[1] == 7.0);
  CHECK(channel_sums(g) == std::vector<double>{7.0});
}
