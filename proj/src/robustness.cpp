#include "mmsc/robustness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "mmsc/config.hpp"

namespace mmsc {

using nlohmann::json;

std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::shuffle: return "shuffle";
    case CorruptionKind::gaussian_snr: return "gaussian_snr";
  }
  return "none";
}

CorruptionKind corruption_from_string(std::string_view s) {
  if (s == "none") return CorruptionKind::none;
  if (s == "shuffle") return CorruptionKind::shuffle;
  if (s == "gaussian_snr" || s == "gaussian") return CorruptionKind::gaussian_snr;
  throw ConfigError("unknown corruption kind '" + std::string(s) + "' (expected none, shuffle or gaussian_snr)");
}

std::string to_string(Phase p) { return p == Phase::train ? "train" : "test"; }

Phase phase_from_string(std::string_view s) {
  if (s == "train") return Phase::train;
  if (s == "test") return Phase::test;
  throw ConfigError("unknown phase '" + std::string(s) + "' (expected train or test)");
}

void Scenario::validate(std::size_t modalities) const {
  std::vector<std::string> errors;
  for (std::size_t t : targets) {
    if (t >= modalities) errors.push_back("target modality " + std::to_string(t) + " out of range");
  }
  for (std::size_t t : available) {
    if (t >= modalities) errors.push_back("available modality " + std::to_string(t) + " out of range");
  }
  if (std::set<std::size_t>(available.begin(), available.end()).size() != available.size()) {
    errors.emplace_back("available modalities repeat");
  }
  if (kind != CorruptionKind::none && targets.empty()) errors.emplace_back("corruption needs at least one target");
  if (kind == CorruptionKind::gaussian_snr && std::isnan(snr_db)) errors.emplace_back("snr_db must be a number");
  if (kind == CorruptionKind::gaussian_snr && std::isinf(snr_db) && snr_db < 0) {
    errors.emplace_back("snr_db of -inf is not allowed");
  }
  if (seeds.empty()) errors.emplace_back("seeds must not be empty");
  if (!errors.empty()) {
    std::string msg = "scenario '" + name + "':";
    for (const auto& e : errors) msg += " " + e + ";";
    throw ConfigError(msg);
  }
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void check_modality(const ModalityDataset& data, std::size_t t) {
  if (t >= data.num_modalities()) {
    throw DimensionError("modality " + std::to_string(t) + " out of range (dataset has " +
                         std::to_string(data.num_modalities()) + ")");
  }
}

}  // namespace

ModalityDataset shuffle_pixels(const ModalityDataset& data, std::size_t t, std::uint64_t seed) {
  check_modality(data, t);
  const std::size_t D = data.pixels();
  std::vector<Eigen::Index> perm(D);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  if (D > 1) {
    // the identity permutation would leave the modality untouched; redraw
    do {
      std::shuffle(perm.begin(), perm.end(), rng);
    } while (std::is_sorted(perm.begin(), perm.end()));
  }
  ModalityDataset out = data;
  const Matrix& src = data.modalities[t];
  Matrix& dst = out.modalities[t];
  for (std::size_t j = 0; j < D; ++j) dst.col(static_cast<Eigen::Index>(j)) = src.col(perm[j]);
  return out;
}

ModalityDataset add_gaussian_snr(const ModalityDataset& data, std::size_t t, double snr_db, std::uint64_t seed) {
  check_modality(data, t);
  if (std::isnan(snr_db) || (std::isinf(snr_db) && snr_db < 0)) {
    throw NumericError("add_gaussian_snr: snr_db must be a number or +inf");
  }
  if (std::isinf(snr_db)) return data;
  const Matrix& x = data.modalities[t];
  const double power = x.size() > 0 ? x.squaredNorm() / static_cast<double>(x.size()) : 0.0;
  if (!(power > 0.0)) throw NumericError("add_gaussian_snr: modality " + std::to_string(t) + " has zero signal power");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  ModalityDataset out = data;
  Matrix& y = out.modalities[t];
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) y(i, j) += normal(rng);
  return out;
}

ModalityDataset corrupt(const ModalityDataset& data, const Scenario& scenario, std::uint64_t seed) {
  ModalityDataset out = data;
  for (std::size_t t : scenario.targets) {
    const std::uint64_t s = mix(seed, t);
    switch (scenario.kind) {
      case CorruptionKind::none: break;
      case CorruptionKind::shuffle: out = shuffle_pixels(out, t, s); break;
      case CorruptionKind::gaussian_snr: out = add_gaussian_snr(out, t, scenario.snr_db, s); break;
    }
  }
  return out;
}

PerturbationReport perturbation_report(const Matrix& clean, const Matrix& perturbed, std::size_t clusters) {
  if (clean.rows() != clean.cols() || clean.rows() != perturbed.rows() || clean.cols() != perturbed.cols()) {
    throw DimensionError("perturbation_report: affinities must be square and of equal shape");
  }
  const Eigen::Index n = clean.rows();
  if (clusters < 2 || static_cast<Eigen::Index>(clusters) >= n) {
    throw DimensionError("perturbation_report: need 2 <= P < n");
  }
  require_finite(clean, "clean affinity");
  require_finite(perturbed, "perturbed affinity");

  PerturbationReport r;
  const Matrix delta = perturbed - clean;
  r.frob_distance = delta.norm();
  r.max_entry_delta = delta.cwiseAbs().maxCoeff();
  r.bound_n_eps = static_cast<double>(n) * r.max_entry_delta;
  r.frob_bound_holds = r.frob_distance <= r.bound_n_eps;

  const auto P = static_cast<Eigen::Index>(clusters);
  Eigen::SelfAdjointEigenSolver<Matrix> a(clean), b(perturbed);
  if (a.info() != Eigen::Success || b.info() != Eigen::Success) {
    throw NumericError("perturbation_report: eigendecomposition failed");
  }
  // ascending eigenvalues: the P largest are the last P
  const Matrix ua = a.eigenvectors().rightCols(P), ub = b.eigenvectors().rightCols(P);
  r.projector_distance = (ua * ua.transpose() - ub * ub.transpose()).norm();
  r.spectral_gap = std::abs(a.eigenvalues()(n - P) - a.eigenvalues()(n - P - 1));
  r.gap_degenerate = !(r.spectral_gap > kGapTolerance);
  if (!r.gap_degenerate) {
    r.bound_rhs = std::sqrt(2.0) / r.spectral_gap * r.frob_distance;
    r.projector_bound_holds = r.projector_distance <= r.bound_rhs;
  }
  return r;
}

json to_json(const PerturbationReport& r) {
  json j = {{"frob_distance", r.frob_distance},
            {"max_entry_delta", r.max_entry_delta},
            {"bound_n_eps", r.bound_n_eps},
            {"frob_bound_holds", r.frob_bound_holds},
            {"projector_distance", r.projector_distance},
            {"spectral_gap", r.spectral_gap},
            {"gap_degenerate", r.gap_degenerate}};
  if (r.gap_degenerate) {
    j["bound_rhs"] = nullptr;
    j["projector_bound_holds"] = nullptr;
  } else {
    j["bound_rhs"] = r.bound_rhs;
    j["projector_bound_holds"] = r.projector_bound_holds;
  }
  return j;
}

Matrix planted_affinity(std::size_t samples, std::size_t clusters, std::uint64_t seed) {
  if (clusters < 2 || samples < 2 * clusters) throw DimensionError("planted_affinity: need n >= 2P and P >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> in(0.5, 1.0), out(0.0, 0.05);
  const auto n = static_cast<Eigen::Index>(samples);
  Matrix a = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < j; ++i) {
      const bool same = static_cast<std::size_t>(i) * clusters / samples == static_cast<std::size_t>(j) * clusters / samples;
      a(i, j) = a(j, i) = same ? in(rng) : out(rng);
    }
  }
  return a;
}

std::vector<PerturbationReport> perturbation_sweep(const Matrix& clean, std::size_t clusters, std::size_t count,
                                                   double scale, std::uint64_t seed) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("perturbation_sweep: scale must be positive");
  const double gap = perturbation_report(clean, clean, clusters).spectral_gap;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> size(0.1, 1.0);
  const Eigen::Index n = clean.rows();
  std::vector<PerturbationReport> out;
  for (std::size_t k = 0; k < count; ++k) {
    Matrix d = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < j; ++i) d(i, j) = d(j, i) = normal(rng);
    const double target = size(rng) * scale * gap;
    if (d.norm() > 0.0) d *= target / d.norm();
    const Matrix perturbed = (clean + d).cwiseMax(0.0);
    out.push_back(perturbation_report(clean, perturbed, clusters));
  }
  return out;
}

namespace {

std::string corruption_key(const Scenario& s) {
  if (s.kind == CorruptionKind::none || s.phase == Phase::test) return "clean";
  std::ostringstream os;
  os << to_string(s.kind);
  for (auto t : s.targets) os << ':' << t;
  if (s.kind == CorruptionKind::gaussian_snr) os << "@" << s.snr_db;
  return os.str();
}

std::string cell_key(const ModelConfig& model, const PipelineOptions& options, Variant v, std::uint64_t seed,
                     const std::string& corruption) {
  json j = to_json(model);
  j["variant"] = to_string(v);
  j["seed"] = seed;
  j["options"] = to_json(options);
  return json_fingerprint(j) + "|" + corruption;
}

std::shared_ptr<const TrainedRun> cell(const SyntheticDataset& data, const ModelConfig& model,
                                       const PipelineOptions& options, Variant v, std::uint64_t seed,
                                       const Scenario* train_corruption, RunCache& cache) {
  const std::string ck = train_corruption ? corruption_key(*train_corruption) : "clean";
  return cache.get_or_run(cell_key(model, options, v, seed, ck), [&] {
    ModelConfig cfg = model;
    cfg.variant = v;
    const ModalityDataset learning =
        ck == "clean" ? data.learning : corrupt(data.learning, *train_corruption, mix(seed, 1000));
    return train_and_cluster(learning, cfg, options, seed);
  });
}

std::string subset_label(const std::vector<std::size_t>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(s[i]);
  }
  return out;
}

// Non-empty subsets of `pool`, by size then lexicographically.
std::vector<std::vector<std::size_t>> subsets_of(const std::vector<std::size_t>& pool) {
  std::vector<std::vector<std::size_t>> out;
  const std::size_t m = pool.size();
  for (std::size_t k = 1; k <= m; ++k) {
    std::vector<bool> pick(m, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
    do {
      std::vector<std::size_t> s;
      for (std::size_t i = 0; i < m; ++i)
        if (pick[i]) s.push_back(pool[i]);
      out.push_back(s);
    } while (std::prev_permutation(pick.begin(), pick.end()));
  }
  return out;
}

std::vector<std::size_t> all_modalities(std::size_t T) {
  std::vector<std::size_t> v(T);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(jobs, count); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) guarded(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double safe_max(const Matrix& a) { return a.size() ? a.maxCoeff() : 0.0; }

// Mean of the per-matrix affinities |W|+|W|^T, each scaled to a unit maximum entry.
Matrix unit_affinity(const MultiBranchAutoencoder& model) {
  Matrix sum;
  for (const auto& w : model.coefficients) {
    Matrix a = build_affinity(w);
    const double m = safe_max(a);
    if (m > 0) a /= m;
    sum = sum.size() ? Matrix(sum + a) : a;
  }
  return sum / static_cast<double>(model.coefficients.size());
}

}  // namespace

ExperimentReport run_experiment(const SyntheticDataset& data, const ExperimentSpec& spec, RunCache& cache,
                                std::size_t jobs) {
  const std::size_t T = data.learning.num_modalities();
  for (const auto& s : spec.scenarios) s.validate(T);
  if (!data.learning.has_labels()) throw ConfigError("experiments need a labeled learning split");

  // every distinct training cell, trained up front (possibly in parallel)
  struct Cell {
    Variant variant;
    std::uint64_t seed;
    const Scenario* corruption;
  };
  std::vector<Cell> cells;
  std::set<std::string> seen;
  for (const auto& s : spec.scenarios) {
    for (auto v : spec.variants) {
      for (auto seed : s.seeds) {
        for (const Scenario* c : {static_cast<const Scenario*>(nullptr), &s}) {
          const std::string key = to_string(v) + "|" + std::to_string(seed) + "|" + (c ? corruption_key(*c) : "clean");
          if (seen.insert(key).second) cells.push_back({v, seed, c && corruption_key(*c) != "clean" ? c : nullptr});
        }
      }
    }
  }
  parallel_for(cells.size(), jobs, [&](std::size_t i) {
    cell(data, spec.model, spec.options, cells[i].variant, cells[i].seed, cells[i].corruption, cache);
  });

  ExperimentReport report;
  const bool has_validation = data.validation.num_samples() > 0 && data.validation.has_labels();
  for (const auto& s : spec.scenarios) {
    const bool train_phase = s.phase == Phase::train && s.kind != CorruptionKind::none;
    const std::vector<std::size_t> pool = s.available.empty() ? all_modalities(T) : s.available;
    std::vector<std::vector<std::size_t>> subsets;
    if (s.sweep_subsets) {
      for (auto& sub : subsets_of(pool)) {
        const bool touches = std::any_of(sub.begin(), sub.end(), [&](std::size_t t) {
          return std::find(s.targets.begin(), s.targets.end(), t) != s.targets.end();
        });
        // noisy-test sweeps only make sense on subsets that include a noisy modality
        if (s.phase == Phase::test && s.kind != CorruptionKind::none && !touches) continue;
        subsets.push_back(std::move(sub));
      }
    } else {
      subsets.push_back(pool);
    }

    for (auto v : spec.variants) {
      for (auto seed : s.seeds) {
        auto clean = cell(data, spec.model, spec.options, v, seed, nullptr, cache);
        auto run = train_phase ? cell(data, spec.model, spec.options, v, seed, &s, cache) : clean;
        for (const auto& w : run->training.warnings) {
          report.warnings.push_back(s.name + "/" + to_string(v) + "/seed " + std::to_string(seed) + ": " + w);
        }

        ExperimentRow row;
        row.scenario = s.name;
        row.variant = to_string(v);
        row.seed = seed;
        row.phase = "learning";
        row.modalities_available = subset_label(all_modalities(T));
        row.subset_size = T;
        row.acc = run->learning_metrics->acc;
        row.ari = run->learning_metrics->ari;
        row.nmi = run->learning_metrics->nmi;
        row.acc_drop = clean->learning_metrics->acc - row.acc;
        report.rows.push_back(row);

        if (!has_validation) continue;
        const ModalityDataset test =
            s.phase == Phase::test ? corrupt(data.validation, s, mix(seed, 2000)) : data.validation;
        for (const auto& sub : subsets) {
          const MetricSet m = score_labels(classify_dataset(*run, test, sub, spec.options), test.labels);
          const MetricSet base =
              score_labels(classify_dataset(*clean, data.validation, sub, spec.options), data.validation.labels);
          row.phase = "validation";
          row.modalities_available = subset_label(sub);
          row.subset_size = sub.size();
          row.acc = m.acc;
          row.ari = m.ari;
          row.nmi = m.nmi;
          row.acc_drop = base.acc - m.acc;
          report.rows.push_back(row);
        }
      }
    }
  }
  return report;
}

ExperimentReport run_scenario(const SyntheticDataset& data, const ModelConfig& model,
                              const PipelineOptions& options, const Scenario& scenario,
                              const std::vector<Variant>& variants, RunCache& cache) {
  ExperimentSpec spec;
  spec.model = model;
  spec.options = options;
  spec.variants = variants;
  spec.scenarios = {scenario};
  return run_experiment(data, spec, cache);
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string to_csv(const ExperimentReport& report) {
  std::string out = "scenario,variant,seed,phase,modalities_available,acc,ari,nmi,acc_drop\n";
  for (const auto& r : report.rows) {
    out += r.scenario + "," + r.variant + "," + std::to_string(r.seed) + "," + r.phase + "," +
           r.modalities_available + "," + fmt(r.acc) + "," + fmt(r.ari) + "," + fmt(r.nmi) + "," + fmt(r.acc_drop) +
           "\n";
  }
  return out;
}

json to_json(const ExperimentReport& report) {
  // scenario -> variant -> seed -> rows, in first-appearance order
  json scenarios = json::array();
  for (const auto& r : report.rows) {
    auto find = [](json& arr, const char* key, const json& value) -> json& {
      for (auto& e : arr)
        if (e[key] == value) return e;
      arr.push_back({{key, value}});
      return arr.back();
    };
    json& s = find(scenarios, "scenario", r.scenario);
    if (!s.contains("variants")) s["variants"] = json::array();
    json& v = find(s["variants"], "variant", r.variant);
    if (!v.contains("seeds")) v["seeds"] = json::array();
    json& sd = find(v["seeds"], "seed", r.seed);
    if (!sd.contains("results")) sd["results"] = json::array();
    sd["results"].push_back({{"phase", r.phase},
                             {"modalities_available", r.modalities_available},
                             {"acc", r.acc},
                             {"ari", r.ari},
                             {"nmi", r.nmi},
                             {"acc_drop", r.acc_drop}});
  }
  return {{"scenarios", scenarios}, {"warnings", report.warnings}};
}

double mean_acc(const ExperimentReport& report, const std::string& scenario, const std::string& variant,
                const std::string& phase, std::size_t subset_size) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : report.rows) {
    if (!scenario.empty() && r.scenario != scenario) continue;
    if (!variant.empty() && r.variant != variant) continue;
    if (!phase.empty() && r.phase != phase) continue;
    if (subset_size != 0 && r.subset_size != subset_size) continue;
    sum += r.acc;
    ++count;
  }
  return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

ResilienceReport resilience_comparison(const SyntheticDataset& data, const ModelConfig& model,
                                       const PipelineOptions& options, const std::vector<Variant>& variants,
                                       const Scenario& corruption, RunCache& cache) {
  const std::size_t T = data.learning.num_modalities();
  corruption.validate(T);
  if (variants.size() < 2) throw ConfigError("resilience_comparison needs at least two variants");
  if (corruption.seeds.size() < 3) throw ConfigError("resilience_comparison needs at least three seeds");
  Scenario train_corruption = corruption;
  train_corruption.phase = Phase::train;

  ResilienceReport out;
  out.ordering_asserted = std::set<std::size_t>(corruption.targets.begin(), corruption.targets.end()).size() < T;
  for (auto v : variants) {
    VariantResilience vr;
    vr.variant = v;
    for (auto seed : corruption.seeds) {
      auto clean = cell(data, model, options, v, seed, nullptr, cache);
      auto hit = corruption.kind == CorruptionKind::none ? clean
                                                         : cell(data, model, options, v, seed, &train_corruption, cache);
      vr.drops.push_back(clean->learning_metrics->acc - hit->learning_metrics->acc);
      const double eps = (unit_affinity(hit->model) - unit_affinity(clean->model)).cwiseAbs().maxCoeff();
      vr.perturbations.push_back(eps * eps);
      const double sa = safe_max(clean->affinity), sb = safe_max(hit->affinity);
      const Matrix a = sa > 0 ? Matrix(clean->affinity / sa) : clean->affinity;
      const Matrix b = sb > 0 ? Matrix(hit->affinity / sb) : hit->affinity;
      const double fused = (b - a).cwiseAbs().maxCoeff();
      vr.fused_max_perturbations.push_back(fused * fused);
    }
    auto mean = [](const std::vector<double>& x) {
      return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    };
    vr.mean_acc_drop = mean(vr.drops);
    vr.mean_sq_perturbation = mean(vr.perturbations);
    vr.mean_sq_fused_max_perturbation = mean(vr.fused_max_perturbations);
    out.variants.push_back(std::move(vr));
  }
  auto find = [&](Variant v) -> const VariantResilience* {
    for (const auto& vr : out.variants)
      if (vr.variant == v) return &vr;
    return nullptr;
  };
  const auto* dro = find(Variant::drogsure);
  const auto* dmsc = find(Variant::dmsc);
  if (dro && dmsc) {
    out.drogsure_drop_le_dmsc = dro->mean_acc_drop <= dmsc->mean_acc_drop;
    out.perturbation_ordering = dro->mean_sq_perturbation < dmsc->mean_sq_perturbation;
    out.perturbation_ratio = dro->mean_sq_perturbation > 0
                                 ? dmsc->mean_sq_perturbation / dro->mean_sq_perturbation
                                 : std::numeric_limits<double>::infinity();
  }
  return out;
}

json to_json(const ResilienceReport& r) {
  json variants = json::array();
  for (const auto& v : r.variants) {
    variants.push_back({{"variant", to_string(v.variant)},
                        {"mean_acc_drop", v.mean_acc_drop},
                        {"mean_sq_perturbation", v.mean_sq_perturbation},
                        {"acc_drops", v.drops},
                        {"sq_perturbations", v.perturbations},
                        {"mean_sq_fused_max_perturbation", v.mean_sq_fused_max_perturbation},
                        {"sq_fused_max_perturbations", v.fused_max_perturbations}});
  }
  json j = {{"variants", variants},
            {"ordering_asserted", r.ordering_asserted},
            {"drogsure_drop_le_dmsc", r.drogsure_drop_le_dmsc},
            {"perturbation_ordering", r.perturbation_ordering}};
  j["perturbation_ratio"] = std::isfinite(r.perturbation_ratio) ? json(r.perturbation_ratio) : json("inf");
  return j;
}

}  // namespace mmsc
