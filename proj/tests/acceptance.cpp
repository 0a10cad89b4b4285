// Acceptance harness: one PASS/FAIL line per criterion. Trained runs are
// shared between criteria through a single RunCache.

#include <Eigen/QR>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "mmsc/admm.hpp"
#include "mmsc/clustering.hpp"
#include "mmsc/objectives.hpp"
#include "mmsc/robustness.hpp"
#include "oracles.hpp"

using namespace mmsc;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kOracleTol = 1e-10;
constexpr double kScalarTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt(v[i], 3);
  return out + "]";
}

std::vector<std::uint64_t> seeds() {
  std::vector<std::uint64_t> s(kSeeds);
  for (std::size_t i = 0; i < kSeeds; ++i) s[i] = i;
  return s;
}

ModelConfig fixture_model() {
  ModelConfig c;
  c.modalities = 3;
  c.height = c.width = 8;
  c.encoder_layers = arl_encoder();
  c.pretrain_epochs = 100;
  c.finetune_epochs = 300;
  c.learning_rate = 3e-3;
  c.hyper.gamma = 1.0;
  c.hyper.mu = 0.1;
  c.hyper.rho = 0.001;
  c.hyper.lambda_group = 0.01;
  c.hyper.lambda_comm = 0.1;
  return c;
}

struct Shared {
  SyntheticDataset fixture = gen_synthetic(SyntheticSpec::fixture());
  ModelConfig model = fixture_model();
  PipelineOptions options;
  RunCache cache;
};

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(101);
  std::size_t instances = 0;
  double worst = 0.0, worst_scalar = 0.0;
  auto track = [&](double err) { worst = std::max(worst, err); };
  std::uniform_int_distribution<std::size_t> side(3, 7), ch(1, 3), ks(1, 3), st(1, 2);
  for (int trial = 0; trial < 100; ++trial, ++instances) {
    const std::size_t k = 2 * ks(rng) - 1, stride = st(rng);
    const std::size_t h = std::max(side(rng), k), w = std::max(side(rng), k);
    const FeatureMap x = oracle::random_map(rng, 2, h, w, ch(rng));
    const ConvKernel K = oracle::random_kernel(rng, k, x.channels, ch(rng));
    std::vector<double> bias(K.out_channels, 0.1);
    const bool same = trial % 2 == 0 || k > 3;
    const auto got = conv2d(x, K, bias, stride, same ? Padding::same : Padding::valid, Activation::relu);
    const auto want = oracle::conv2d(x, K, bias, stride, same, true);
    for (std::size_t i = 0; i < got.values.size(); ++i) track(std::abs(got.values[i] - want.values[i]));

    const std::size_t oh = conv_output_extent(h, k, stride, Padding::same);
    const std::size_t ow = conv_output_extent(w, k, stride, Padding::same);
    const FeatureMap y = oracle::random_map(rng, 2, oh, ow, K.out_channels);
    const std::vector<double> tb(K.in_channels, -0.05);
    const auto tg = conv2d_transpose(y, K, tb, stride, h, w, Padding::same, Activation::identity);
    const auto tw = oracle::conv2d_transpose(y, K, tb, stride, h, w, true, false);
    for (std::size_t i = 0; i < tg.values.size(); ++i) track(std::abs(tg.values[i] - tw.values[i]));
  }
  std::uniform_real_distribution<double> u(0.0, 1.5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + trial % 4;
    const Eigen::Index n = 2 + trial % 7;
    std::vector<Matrix> g;
    for (std::size_t t = 0; t < T; ++t) g.push_back(oracle::random_zero_diag(rng, n));
    const double beta = u(rng);
    const auto pg = prox_group(g, beta);
    const auto po = oracle::prox_group(g, beta);
    for (std::size_t t = 0; t < T; ++t) worst_scalar = std::max(worst_scalar, (pg[t] - po[t]).cwiseAbs().maxCoeff());
    const Matrix s = shrink_l1(g[0], beta);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        worst_scalar = std::max(worst_scalar, std::abs(s(i, j) - oracle::shrink(g[0](i, j), beta)));
    track(std::abs(group_l12_norm(g) - oracle::group_l12(g)));
    track(std::abs(commutator_penalty(g) - oracle::commutator_penalty(g)));
    const Matrix a = oracle::random_matrix(rng, n, n), b = oracle::random_matrix(rng, n, n);
    track((commutator(a, b) - oracle::commutator(a, b)).cwiseAbs().maxCoeff());
  }
  for (int trial = 0; trial < 102; ++trial) {
    const Variant v = trial % 3 == 0 ? Variant::drogsure : trial % 3 == 1 ? Variant::dmsc : Variant::concat;
    GradCheckToy toy = make_gradcheck_toy(v, static_cast<std::uint64_t>(1000 + trial));
    const auto& m = toy.model;
    const ForwardCache cache = forward(m, toy.data);
    const LossBreakdown got = model_loss(m, cache, toy.data);
    double recon = 0, se = 0, l1 = 0, grp = 0, comm = 0, frob = 0;
    for (std::size_t t = 0; t < 2; ++t) recon += oracle::sq_frobenius(toy.data.modalities[t] - cache.reconstruction(t));
    if (v == Variant::drogsure) {
      for (std::size_t t = 0; t < 2; ++t) {
        se += oracle::selfexpr(cache.branches[t].latent, m.coefficients[t]);
        l1 += oracle::abs_sum(m.coefficients[t]);
      }
      grp = oracle::group_l12(m.coefficients);
      comm = oracle::commutator_penalty(m.coefficients);
    } else if (v == Variant::dmsc) {
      for (std::size_t t = 0; t < 2; ++t) se += oracle::selfexpr(cache.branches[t].latent, m.coefficients[0]);
      frob = std::sqrt(oracle::sq_frobenius(m.coefficients[0]));
    } else {
      se = oracle::selfexpr(cache.stacked, m.coefficients[0]);
      l1 = oracle::abs_sum(m.coefficients[0]);
    }
    for (double e : {got.recon_term - recon, got.selfexpr_term - se, got.l1_term - l1, got.group_term - grp,
                     got.commutator_term - comm, got.frobenius_term - frob})
      track(std::abs(e));
  }
  return {worst <= kOracleTol && worst_scalar <= kScalarTol,
          "100+ instances per operator; max error " + fmt(worst, 3) + " (tol 1e-10), prox/shrink " +
              fmt(worst_scalar, 3) + " (tol 1e-12)"};
}

Outcome gradient_correctness() {
  double worst = 0.0;
  std::size_t blocks = 0;
  bool ok = true;
  for (Variant v : {Variant::drogsure, Variant::dmsc, Variant::concat}) {
    GradCheckToy toy = make_gradcheck_toy(v, 0);
    GradCheckOptions opt;
    opt.tolerance = kGradTol;
    for (const auto& e : gradient_check(toy.model, toy.data, opt)) {
      ++blocks;
      worst = std::max(worst, e.rel_error);
      ok = ok && e.passed && e.rel_error <= kGradTol;
    }
  }
  return {ok, std::to_string(blocks) + " blocks over 3 variants; max relative error " + fmt(worst, 3)};
}

Outcome clean_fixture(Shared& s) {
  Scenario clean;
  clean.name = "clean";
  clean.seeds = seeds();
  ExperimentSpec spec{s.model, s.options, {Variant::drogsure}, {clean}};
  const auto report = run_experiment(s.fixture, spec, s.cache);
  double acc = 0, ari = 0, nmi = 0, val = 0;
  std::size_t nl = 0, nv = 0;
  for (const auto& r : report.rows) {
    if (r.phase == "learning") {
      acc += r.acc;
      ari += r.ari;
      nmi += r.nmi;
      ++nl;
    } else {
      val += r.acc;
      ++nv;
    }
  }
  acc /= static_cast<double>(nl);
  ari /= static_cast<double>(nl);
  nmi /= static_cast<double>(nl);
  val /= static_cast<double>(nv);
  return {acc >= 0.95 && ari >= 0.90 && nmi >= 0.90 && val >= 0.95,
          "ACC " + fmt(acc) + ", ARI " + fmt(ari) + ", NMI " + fmt(nmi) + ", validation ACC " + fmt(val) +
              " over " + std::to_string(nl) + " seeds"};
}

Matrix planted_two_subspaces(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const Eigen::Index n = 40, ambient = 20, dim = 3;
  Matrix l(n, ambient);
  for (int p = 0; p < 2; ++p) {
    Matrix g(ambient, dim);
    for (Eigen::Index i = 0; i < ambient; ++i)
      for (Eigen::Index j = 0; j < dim; ++j) g(i, j) = normal(rng);
    const Matrix basis = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(ambient, dim);
    for (Eigen::Index i = p * n / 2; i < (p + 1) * n / 2; ++i) {
      Eigen::VectorXd c(dim);
      for (Eigen::Index j = 0; j < dim; ++j) c(j) = normal(rng);
      l.row(i) = (basis * c).transpose();
    }
  }
  return l;
}

Outcome admm_recovery() {
  bool ok = true;
  double min_mass = 1.0, min_acc = 1.0;
  std::size_t increases = 0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const std::vector<Matrix> f{planted_two_subspaces(seed)};
    AdmmConfig c;
    c.growth = 2.0;
    const auto r = admm_run(f, c);
    const Matrix& w = r.omega[0];
    const double inside = w.topLeftCorner(20, 20).cwiseAbs().sum() + w.bottomRightCorner(20, 20).cwiseAbs().sum();
    const double mass = inside / w.cwiseAbs().sum();
    const double slack = 1e-12 * f[0].norm();
    for (std::size_t k = 10; k < r.residuals.size(); ++k) increases += r.residuals[k][0] > r.residuals[k - 1][0] + slack;
    std::vector<int> truth(40);
    for (int i = 0; i < 40; ++i) truth[static_cast<std::size_t>(i)] = i < 20 ? 0 : 1;
    const double acc = cluster_accuracy(spectral_cluster(build_affinity(w), 2, seed), truth);
    min_mass = std::min(min_mass, mass);
    min_acc = std::min(min_acc, acc);
    ok = ok && mass >= 0.95 && acc == 1.0;
  }
  ok = ok && increases == 0;
  return {ok, "min block mass " + fmt(min_mass) + ", residual increases after iteration 10: " +
                  std::to_string(increases) + ", min ACC " + fmt(min_acc) + " over " + std::to_string(kSeeds) +
                  " planted instances"};
}

Outcome robustness_ordering(Shared& s) {
  Scenario shuffle;
  shuffle.name = "shuffle";
  shuffle.kind = CorruptionKind::shuffle;
  shuffle.targets = {0};
  shuffle.seeds = seeds();
  const auto r = resilience_comparison(s.fixture, s.model, s.options, {Variant::drogsure, Variant::dmsc}, shuffle,
                                       s.cache);
  const auto& dro = r.variants[0];
  const auto& dmsc = r.variants[1];
  return {r.drogsure_drop_le_dmsc && r.perturbation_ordering,
          "ACC drop drogsure " + fmt(dro.mean_acc_drop) + " " + fmt_list(dro.drops) + " vs dmsc " +
              fmt(dmsc.mean_acc_drop) + " " + fmt_list(dmsc.drops) +
              "; E(eps^2) " + fmt(dro.mean_sq_perturbation) + " vs E(psi^2) " + fmt(dmsc.mean_sq_perturbation) +
              " (fused-max statistic " + fmt(dro.mean_sq_fused_max_perturbation) + " vs " +
              fmt(dmsc.mean_sq_fused_max_perturbation) + ")"};
}

Outcome perturbation_bounds() {
  std::size_t checks = 0, frob_fail = 0, proj_fail = 0, degenerate = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Matrix clean = planted_affinity(60, 4, seed);
    for (double scale : {0.25, 1.0, 4.0}) {
      for (const auto& r : perturbation_sweep(clean, 4, 20, scale, seed)) {
        ++checks;
        frob_fail += !r.frob_bound_holds;
        if (r.gap_degenerate) {
          ++degenerate;
        } else {
          proj_fail += !r.projector_bound_holds;
        }
      }
    }
  }
  return {checks >= 20 && frob_fail == 0 && proj_fail == 0,
          std::to_string(checks) + " perturbations; Frobenius violations " + std::to_string(frob_fail) +
              ", projector violations " + std::to_string(proj_fail) + ", gap-degenerate " +
              std::to_string(degenerate)};
}

Outcome missing_modalities(Shared& s) {
  Scenario missing;
  missing.name = "missing";
  missing.sweep_subsets = true;
  missing.seeds = seeds();
  ExperimentSpec spec{s.model, s.options, {Variant::drogsure}, {missing}};
  const auto report = run_experiment(s.fixture, spec, s.cache);
  const double a3 = mean_acc(report, "missing", "drogsure", "validation", 3);
  const double a2 = mean_acc(report, "missing", "drogsure", "validation", 2);
  const double a1 = mean_acc(report, "missing", "drogsure", "validation", 1);
  return {a3 >= a2 && a2 >= a1 && a1 >= 0.6,
          "validation ACC with 3/2/1 modalities: " + fmt(a3) + " / " + fmt(a2) + " / " + fmt(a1)};
}

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        less += w < v[i];
        equal += w == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : std::numeric_limits<double>::quiet_NaN();
}

Outcome snr_sweep(Shared& s) {
  const std::vector<double> snrs{0, 10, 20, 30};
  ExperimentSpec spec{s.model, s.options, {Variant::drogsure}, {}};
  for (double snr : snrs) {
    Scenario sc;
    sc.name = "snr" + fmt(snr);
    sc.kind = CorruptionKind::gaussian_snr;
    sc.phase = Phase::test;
    sc.targets = {0};
    sc.snr_db = snr;
    sc.seeds = seeds();
    spec.scenarios.push_back(sc);
  }
  const auto report = run_experiment(s.fixture, spec, s.cache);
  std::vector<double> acc;
  std::string detail = "validation ACC at";
  for (double snr : snrs) {
    acc.push_back(mean_acc(report, "snr" + fmt(snr), "drogsure", "validation"));
    detail += " " + fmt(snr) + "dB=" + fmt(acc.back());
  }
  bool nondecreasing = true;
  for (std::size_t i = 1; i < acc.size(); ++i) nondecreasing = nondecreasing && acc[i] >= acc[i - 1];
  const double rho = spearman(snrs, acc);
  // a flat curve has no rank variance; it is non-decreasing, and counts as a pass
  const bool flat = std::isnan(rho) && nondecreasing;
  detail += flat ? "; constant across the sweep" : "; Spearman " + fmt(rho);
  return {flat || rho >= 0.9, detail};
}

std::map<std::string, std::string> artifact_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "mmsc_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };

  const fs::path data = root / "data";
  if (run({"gen", "--clusters", "2", "--per-cluster", "8", "--side", "5", "--modalities", "2", "--shared-dim", "2",
           "--private-dim", "1", "--seed", "1", "--out", data.string()}) != 0)
    return {false, "gen failed"};
  const fs::path cfg = root / "config.json";
  std::ofstream(cfg) << R"({"dataset": ")" << data.string() << R"(",
    "encoder": [{"filters": 3, "kernel": 3}, {"filters": 2, "kernel": 1}, {"filters": 2, "kernel": 1}],
    "pretrain_epochs": 3, "finetune_epochs": 4, "variants": ["drogsure", "dmsc", "concat"],
    "scenarios": [{"name": "clean"}, {"name": "noisy", "kind": "gaussian_snr", "targets": [1], "snr_db": 5,
                   "phase": "test", "sweep_subsets": true, "seeds": [0, 1]}]})";

  using Command = std::function<std::vector<std::string>(const fs::path&)>;
  const std::vector<std::pair<std::string, Command>> commands{
      {"gen",
       [&](const fs::path& o) {
         return std::vector<std::string>{"gen", "--seed", "1", "--clusters", "2", "--per-cluster", "8", "--side",
                                         "5", "--modalities", "2", "--out", o.string()};
       }},
      {"train", [&](const fs::path& o) { return std::vector<std::string>{"train", "--config", cfg.string(), "--out", o.string()}; }},
      {"cluster",
       [&](const fs::path& o) {
         return std::vector<std::string>{"cluster", "--checkpoint", (root / "train_0" / "checkpoint.bin").string(),
                                         "--config", cfg.string(), "--write-affinity", "--out", o.string()};
       }},
      {"experiment",
       [&](const fs::path& o) {
         return std::vector<std::string>{"experiment", "--config", cfg.string(), "--out", o.string()};
       }},
      {"bounds", [&](const fs::path& o) { return std::vector<std::string>{"bounds", "--seed", "2", "--out", o.string()}; }},
      {"gradcheck", [&](const fs::path& o) { return std::vector<std::string>{"gradcheck", "--out", o.string()}; }},
  };
  std::size_t compared = 0;
  for (const auto& [name, make] : commands) {
    const fs::path a = root / (name + "_0"), b = root / (name + "_1");
    if (run(make(a)) != 0 || run(make(b)) != 0) return {false, name + " exited non-zero"};
    const auto fa = artifact_bytes(a), fb = artifact_bytes(b);
    if (fa.empty() || fa != fb) return {false, name + " artifacts differ between reruns"};
    compared += fa.size();
  }
  return {true, std::to_string(commands.size()) + " commands, " + std::to_string(compared) +
                    " artifacts byte-identical across reruns"};
}

}  // namespace

int main() {
  Shared shared;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"gradient correctness", gradient_correctness},
      {"clean-fixture clustering", [&] { return clean_fixture(shared); }},
      {"ADMM planted recovery", admm_recovery},
      {"robustness ordering under train-time shuffle", [&] { return robustness_ordering(shared); }},
      {"affinity perturbation bounds", perturbation_bounds},
      {"missing-modality degradation", [&] { return missing_modalities(shared); }},
      {"SNR sweep monotonicity", [&] { return snr_sweep(shared); }},
      {"CLI determinism", cli_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s [%zu] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
