#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "mmsc/errors.hpp"
#include "mmsc/robustness.hpp"
#include "oracles.hpp"

using namespace mmsc;

namespace {

ModalityDataset image_data(std::size_t n, std::size_t T, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModalityDataset d;
  d.height = d.width = side;
  for (std::size_t t = 0; t < T; ++t) {
    d.modalities.push_back(oracle::random_matrix(rng, static_cast<Eigen::Index>(n),
                                                 static_cast<Eigen::Index>(side * side), 0.0, 1.0));
  }
  return d;
}

SyntheticDataset tiny_dataset() {
  SyntheticSpec s;
  s.clusters = 2;
  s.per_cluster = 8;
  s.side = 5;
  s.modalities = 3;
  s.shared_dim = 2;
  s.private_dim = 1;
  s.seed = 3;
  return gen_synthetic(s);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.modalities = 3;
  c.height = c.width = 5;
  c.encoder_layers = {{3, 3, Activation::relu}, {2, 1, Activation::relu}, {2, 1, Activation::relu}};
  c.pretrain_epochs = 2;
  c.finetune_epochs = 2;
  return c;
}

}  // namespace

TEST_CASE("pixel shuffling permutes one modality with one fixed permutation") {
  const auto d = image_data(6, 3, 4, 1);
  const auto s = shuffle_pixels(d, 1, 77);
  CHECK(s.modalities[0] == d.modalities[0]);
  CHECK(s.modalities[2] == d.modalities[2]);
  CHECK(s.modalities[1] != d.modalities[1]);
  // every row is a rearrangement of the original row
  for (Eigen::Index i = 0; i < 6; ++i) {
    std::vector<double> a(d.modalities[1].row(i).begin(), d.modalities[1].row(i).end());
    std::vector<double> b(s.modalities[1].row(i).begin(), s.modalities[1].row(i).end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  // same permutation for every image: recover it from row 0 and apply it to the rest
  std::vector<Eigen::Index> perm(16);
  for (Eigen::Index j = 0; j < 16; ++j) {
    for (Eigen::Index k = 0; k < 16; ++k)
      if (s.modalities[1](0, j) == d.modalities[1](0, k)) perm[static_cast<std::size_t>(j)] = k;
  }
  for (Eigen::Index i = 1; i < 6; ++i)
    for (Eigen::Index j = 0; j < 16; ++j) CHECK(s.modalities[1](i, j) == d.modalities[1](i, perm[static_cast<std::size_t>(j)]));

  CHECK(shuffle_pixels(d, 1, 77).modalities[1] == s.modalities[1]);
  CHECK(shuffle_pixels(d, 1, 78).modalities[1] != s.modalities[1]);
  CHECK_THROWS_AS(shuffle_pixels(d, 3, 0), DimensionError);
}

TEST_CASE("gaussian noise at a given SNR") {
  const auto d = image_data(200, 2, 10, 2);
  const double power = d.modalities[0].squaredNorm() / static_cast<double>(d.modalities[0].size());
  for (double snr : {0.0, 10.0, 20.0}) {
    const auto noisy = add_gaussian_snr(d, 0, snr, 5);
    const Matrix e = noisy.modalities[0] - d.modalities[0];
    const double var = e.squaredNorm() / static_cast<double>(e.size());
    const double want = power / std::pow(10.0, snr / 10.0);
    CHECK(std::abs(var - want) <= 0.05 * want);
    CHECK(noisy.modalities[1] == d.modalities[1]);
  }
  CHECK(add_gaussian_snr(d, 0, std::numeric_limits<double>::infinity(), 5).modalities[0] == d.modalities[0]);
  ModalityDataset dark = d;
  dark.modalities[0].setZero();
  CHECK_THROWS_AS(add_gaussian_snr(dark, 0, 10.0, 1), NumericError);
  CHECK_THROWS_AS(add_gaussian_snr(d, 0, std::numeric_limits<double>::quiet_NaN(), 1), NumericError);
}

TEST_CASE("corrupt touches only the targets and is reproducible") {
  const auto d = image_data(5, 3, 4, 3);
  Scenario s;
  s.kind = CorruptionKind::gaussian_snr;
  s.snr_db = 5;
  s.targets = {0, 2};
  const auto a = corrupt(d, s, 9);
  CHECK(a.modalities[1] == d.modalities[1]);
  CHECK(a.modalities[0] != d.modalities[0]);
  CHECK(a.modalities[2] != d.modalities[2]);
  CHECK(corrupt(d, s, 9).modalities[0] == a.modalities[0]);
}

TEST_CASE("scenario validation reports every problem") {
  Scenario s;
  s.kind = CorruptionKind::shuffle;
  s.available = {0, 0, 5};
  s.seeds.clear();
  try {
    s.validate(3);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    CHECK(m.find("out of range") != std::string::npos);
    CHECK(m.find("repeat") != std::string::npos);
    CHECK(m.find("target") != std::string::npos);
    CHECK(m.find("seeds") != std::string::npos);
  }
  Scenario ok;
  CHECK_NOTHROW(ok.validate(1));
  CHECK(corruption_from_string(to_string(CorruptionKind::gaussian_snr)) == CorruptionKind::gaussian_snr);
  CHECK(phase_from_string("test") == Phase::test);
  CHECK_THROWS(corruption_from_string("blur"));
}

TEST_CASE("perturbation report examples") {
  const Matrix a = planted_affinity(12, 3, 1);
  SUBCASE("identical inputs") {
    const auto r = perturbation_report(a, a, 3);
    CHECK(r.frob_distance == 0.0);
    CHECK(r.max_entry_delta == 0.0);
    CHECK(r.projector_distance <= 1e-10);
    CHECK(r.frob_bound_holds);
    CHECK(r.projector_bound_holds == (r.projector_distance <= 0.0));
  }
  SUBCASE("one symmetric pair changed by 0.2") {
    Matrix b = a;
    b(0, 5) += 0.2;
    b(5, 0) += 0.2;
    const auto r = perturbation_report(a, b, 3);
    CHECK(r.frob_distance == doctest::Approx(std::sqrt(2.0) * 0.2).epsilon(1e-12));
    CHECK(r.max_entry_delta == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r.bound_n_eps == doctest::Approx(12 * 0.2).epsilon(1e-12));
    CHECK(r.frob_bound_holds);
    CHECK_FALSE(r.gap_degenerate);
    CHECK(r.bound_rhs == doctest::Approx(std::sqrt(2.0) / r.spectral_gap * r.frob_distance));
  }
  SUBCASE("a degenerate gap skips the projector check") {
    const Matrix zero = Matrix::Zero(6, 6);
    const auto r = perturbation_report(zero, zero, 2);
    CHECK(r.gap_degenerate);
    CHECK_FALSE(r.projector_bound_holds);
    const auto j = to_json(r);
    CHECK(j["bound_rhs"].is_null());
  }
  CHECK_THROWS_AS(perturbation_report(a, Matrix::Zero(5, 5), 3), DimensionError);
  CHECK_THROWS_AS(perturbation_report(a, a, 12), DimensionError);
}

TEST_CASE("planted affinities and random sweeps satisfy both bounds") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Matrix a = planted_affinity(40, 4, seed);
    CHECK(is_valid_affinity(a));
    const auto reports = perturbation_sweep(a, 4, 25, 0.25, seed);
    CHECK(reports.size() == 25);
    for (const auto& r : reports) {
      CHECK(r.frob_bound_holds);
      CHECK_FALSE(r.gap_degenerate);
      CHECK(r.projector_bound_holds);
      CHECK(r.frob_distance <= 0.25 * r.spectral_gap + 1e-12);
    }
  }
  CHECK_THROWS(planted_affinity(5, 3, 0));
  CHECK_THROWS_AS(perturbation_sweep(planted_affinity(8, 2, 0), 2, 1, 0.0, 0), ConfigError);
}

TEST_CASE("experiment rows, drops and csv layout") {
  const auto data = tiny_dataset();
  ExperimentSpec spec;
  spec.model = tiny_model();
  spec.variants = {Variant::drogsure, Variant::dmsc};
  Scenario clean;
  clean.seeds = {0, 1};
  Scenario missing;
  missing.name = "missing";
  missing.available = {0, 2};
  missing.sweep_subsets = true;
  missing.seeds = {0};
  Scenario shuffled;
  shuffled.name = "shuffled";
  shuffled.kind = CorruptionKind::shuffle;
  shuffled.targets = {1};
  shuffled.seeds = {0};
  spec.scenarios = {clean, missing, shuffled};
  RunCache cache;
  const auto report = run_experiment(data, spec, cache);

  // clean: 2 variants x 2 seeds x (learning + full validation)
  // missing: 2 variants x (learning + 3 non-empty subsets of {0, 2})
  // shuffled: 2 variants x (learning + validation)
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : report.rows) {
    if (r.scenario == "clean") ++counts[0];
    if (r.scenario == "missing") ++counts[1];
    if (r.scenario == "shuffled") ++counts[2];
    if (r.scenario == "clean") CHECK(r.acc_drop == 0.0);
    if (r.phase == "learning" && r.scenario == "missing") CHECK(r.acc_drop == 0.0);
  }
  CHECK(counts[0] == 8);
  CHECK(counts[1] == 8);
  CHECK(counts[2] == 4);
  // clean cells are shared: 2 variants x 2 seeds, plus one shuffled cell per variant
  CHECK(cache.size() == 6);

  const std::string csv = to_csv(report);
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "scenario,variant,seed,phase,modalities_available,acc,ari,nmi,acc_drop");
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == report.rows.size() + 1);
  CHECK(csv.find("missing,drogsure,0,validation,0;2,") != std::string::npos);

  const auto j = to_json(report);
  CHECK(j["scenarios"].size() == 3);

  // a second run reuses the cache and reproduces every row
  const auto again = run_experiment(data, spec, cache);
  CHECK(to_csv(again) == csv);
  CHECK(cache.size() == 6);

  SUBCASE("empty scenario list is a no-op") {
    ExperimentSpec none = spec;
    none.scenarios.clear();
    CHECK(run_experiment(data, none, cache).rows.empty());
  }
  SUBCASE("invalid scenarios are rejected before training") {
    ExperimentSpec bad = spec;
    bad.scenarios[1].available = {7};
    RunCache empty;
    CHECK_THROWS_AS(run_experiment(data, bad, empty), ConfigError);
    CHECK(empty.size() == 0);
  }
}

TEST_CASE("resilience comparison bookkeeping") {
  const auto data = tiny_dataset();
  Scenario none;
  none.seeds = {0, 1, 2};
  RunCache cache;
  const auto r = resilience_comparison(data, tiny_model(), {}, {Variant::drogsure, Variant::dmsc}, none, cache);
  REQUIRE(r.variants.size() == 2);
  for (const auto& v : r.variants) {
    CHECK(v.drops.size() == 3);
    CHECK(v.mean_acc_drop == 0.0);
    CHECK(v.mean_sq_perturbation == 0.0);
  }
  CHECK(r.ordering_asserted);

  Scenario all = none;
  all.kind = CorruptionKind::shuffle;
  all.targets = {0, 1, 2};
  CHECK_FALSE(resilience_comparison(data, tiny_model(), {}, {Variant::drogsure, Variant::dmsc}, all, cache)
                  .ordering_asserted);

  Scenario two = none;
  two.seeds = {0, 1};
  CHECK_THROWS_AS(resilience_comparison(data, tiny_model(), {}, {Variant::drogsure, Variant::dmsc}, two, cache),
                  ConfigError);
  CHECK_THROWS_AS(resilience_comparison(data, tiny_model(), {}, {Variant::drogsure}, none, cache), ConfigError);
}
