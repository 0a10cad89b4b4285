#include <doctest.h>

#include <Eigen/QR>
#include <algorithm>
#include <numeric>
#include <random>

#include "mmsc/clustering.hpp"
#include "mmsc/errors.hpp"
#include "oracles.hpp"

using namespace mmsc;

namespace {

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double assignment_cost(const Matrix& c, const std::vector<std::size_t>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a[i]));
  return s;
}

Matrix block_affinity(std::size_t n, std::size_t k, double inside, double outside) {
  Matrix a = Matrix::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n), outside);
  const std::size_t size = n / k;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i / size == j / size) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = inside;
  a.diagonal().setZero();
  return a;
}

}  // namespace

TEST_CASE("hungarian finds the brute-force optimum") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index k = 1 + trial % 6;
    const Matrix c = oracle::random_matrix(rng, k, k, 0.0, 10.0);
    const auto got = hungarian(c);
    std::vector<std::size_t> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do best = std::min(best, assignment_cost(c, perm));
    while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<std::size_t> sorted = got;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    CHECK(assignment_cost(c, got) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("ACC, ARI and NMI match brute-force oracles") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 120; ++trial) {
    const int k = 2 + trial % 4;
    const std::size_t n = 8 + static_cast<std::size_t>(trial % 20);
    const auto truth = random_labels(rng, n, k);
    auto pred = random_labels(rng, n, k);
    if (trial % 3 == 0) pred = truth;
    CHECK(cluster_accuracy(pred, truth) == doctest::Approx(oracle::accuracy_by_permutation(pred, truth, k)));
    const auto m = ari_nmi(pred, truth);
    CHECK(m.ari == doctest::Approx(oracle::ari_pairs(pred, truth)).epsilon(1e-10));
    CHECK(m.nmi == doctest::Approx(oracle::nmi(pred, truth)).epsilon(1e-10));
    const auto aligned = align_labels(pred, truth);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += aligned[i] == truth[i];
    CHECK(static_cast<double>(hits) / static_cast<double>(n) == doctest::Approx(cluster_accuracy(pred, truth)));
  }
}

TEST_CASE("metric examples") {
  const std::vector<int> truth{0, 0, 1, 1, 2, 2};
  const std::vector<int> renamed{2, 2, 0, 0, 1, 1};
  const auto s = score_labels(renamed, truth);
  CHECK(s.acc == 1.0);
  CHECK(s.ari == doctest::Approx(1.0));
  CHECK(s.nmi == doctest::Approx(1.0));

  const std::vector<int> one_cluster(6, 0);
  const auto d = ari_nmi(one_cluster, truth);
  CHECK(d.nmi_degenerate);
  CHECK(d.nmi == 0.0);
  CHECK(cluster_accuracy(one_cluster, truth) == doctest::Approx(2.0 / 6.0));

  // more predicted clusters than true ones
  const std::vector<int> split{0, 1, 2, 3, 4, 5};
  CHECK(cluster_accuracy(split, truth) == doctest::Approx(3.0 / 6.0));
  CHECK_THROWS(cluster_accuracy(std::vector<int>{0, 1}, truth));
}

TEST_CASE("affinity construction") {
  std::mt19937_64 rng(43);
  const std::vector<Matrix> omega{oracle::random_zero_diag(rng, 7), oracle::random_zero_diag(rng, 7)};
  const Matrix fused = fuse_coefficients(omega);
  CHECK((fused - (omega[0] + omega[1])).cwiseAbs().maxCoeff() == 0.0);
  const Matrix a = build_affinity(fused);
  CHECK(is_valid_affinity(a));
  for (Eigen::Index i = 0; i < 7; ++i)
    for (Eigen::Index j = 0; j < 7; ++j)
      if (i != j) CHECK(a(i, j) == doctest::Approx(std::abs(fused(i, j)) + std::abs(fused(j, i))));

  const Matrix top = build_affinity(fused, 2);
  CHECK(is_valid_affinity(top));
  CHECK((top.array() > 0).count() <= 2 * 2 * 7);

  Matrix asym = a;
  asym(0, 1) += 1e-3;
  CHECK_FALSE(is_valid_affinity(asym));
  Matrix neg = a;
  neg(0, 1) = neg(1, 0) = -0.1;
  CHECK_FALSE(is_valid_affinity(neg));
}

TEST_CASE("spectral clustering recovers clear blocks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Matrix a = block_affinity(30, 3, 1.0, 0.0);
    const Matrix noise = oracle::random_matrix(rng, 30, 30, 0.0, 0.05);
    a += noise + noise.transpose();
    a.diagonal().setZero();
    const auto labels = spectral_cluster(a, 3, seed);
    std::vector<int> truth(30);
    for (int i = 0; i < 30; ++i) truth[static_cast<std::size_t>(i)] = i / 10;
    CHECK(cluster_accuracy(labels, truth) == 1.0);
    CHECK(spectral_cluster(a, 3, seed) == labels);
  }
  CHECK_THROWS(spectral_cluster(Matrix::Zero(6, 6), 2, 0));
  CHECK_THROWS(spectral_cluster(block_affinity(6, 2, 1, 0), 7, 0));
}

TEST_CASE("k-means is deterministic and separates far clusters") {
  std::mt19937_64 rng(44);
  Matrix pts(40, 2);
  for (Eigen::Index i = 0; i < 40; ++i) {
    const double cx = i < 20 ? -5.0 : 5.0;
    pts(i, 0) = cx + std::normal_distribution<double>(0, 0.3)(rng);
    pts(i, 1) = std::normal_distribution<double>(0, 0.3)(rng);
  }
  const auto a = kmeans(pts, 2, 9);
  const auto b = kmeans(pts, 2, 9);
  CHECK(a.labels == b.labels);
  CHECK(a.inertia == b.inertia);
  std::vector<int> truth(40);
  for (int i = 0; i < 40; ++i) truth[static_cast<std::size_t>(i)] = i < 20;
  CHECK(cluster_accuracy(a.labels, truth) == 1.0);
}

TEST_CASE("subspace classification of held-out samples") {
  std::mt19937_64 rng(45);
  std::normal_distribution<double> normal;
  const Eigen::Index D = 12, d = 2, per = 16;
  // two clusters, two modalities, each cluster/modality on its own random plane
  std::vector<Matrix> bases;
  for (int i = 0; i < 4; ++i) {
    Matrix g(D, d);
    for (Eigen::Index r = 0; r < D; ++r)
      for (Eigen::Index c = 0; c < d; ++c) g(r, c) = normal(rng);
    bases.push_back(Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(D, d));
  }
  auto draw = [&](Eigen::Index count, std::vector<int>& labels) {
    // samples come in +-c pairs so every cluster mean sits at the origin
    std::vector<Matrix> f(2, Matrix(2 * count, D));
    std::vector<Eigen::VectorXd> last(2);
    for (Eigen::Index i = 0; i < 2 * count; ++i) {
      const int p = i < count ? 0 : 1;
      labels.push_back(p);
      for (int t = 0; t < 2; ++t) {
        Eigen::VectorXd c(d);
        for (Eigen::Index j = 0; j < d; ++j) c(j) = normal(rng);
        if (i % 2) c = -last[static_cast<std::size_t>(t)];
        last[static_cast<std::size_t>(t)] = c;
        f[static_cast<std::size_t>(t)].row(i) = (bases[static_cast<std::size_t>(2 * p + t)] * c).transpose();
      }
    }
    return f;
  };
  std::vector<int> train_labels, test_labels;
  const auto train = draw(per, train_labels);
  const auto test = draw(10, test_labels);
  const auto sub = fit_cluster_subspaces(train, train_labels, std::size_t{2});
  CHECK(sub.cluster_ids == std::vector<int>{0, 1});
  for (const auto& cl : sub.clusters)
    for (const auto& m : cl) CHECK((m.basis.transpose() * m.basis - Matrix::Identity(2, 2)).norm() <= 1e-10);

  const std::vector<std::size_t> both{0, 1}, first{0}, second{1};
  for (const auto& avail : {both, first, second}) {
    const auto got = classify_all(test, sub, avail);
    CHECK(cluster_accuracy(got, test_labels) == 1.0);
    CHECK(got == test_labels);
  }

  const auto auto_dim = fit_cluster_subspaces(train, train_labels);
  for (const auto& cl : auto_dim.clusters)
    for (const auto& m : cl) CHECK(m.basis.cols() <= 2 + 1);
}
