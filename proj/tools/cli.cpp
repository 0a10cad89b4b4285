#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "mmsc/admm.hpp"
#include "mmsc/config.hpp"
#include "mmsc/errors.hpp"
#include "mmsc/objectives.hpp"
#include "mmsc/version.hpp"

namespace mmsc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream f(file, std::ios::binary);
  if (!f) throw IoError("cannot write " + file.string());
  f << text;
  if (!f) throw IoError("write failed: " + file.string());
}

// Collects the files a command writes and records them in run-manifest.json.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void text(const std::string& name, const std::string& content) {
    write_text(path(name), content);
    add(name);
  }
  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

  void add(const std::string& name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }

  // Every regular file below `sub`, in sorted order.
  void add_tree(const std::string& sub) {
    std::vector<std::string> found;
    for (const auto& e : fs::recursive_directory_iterator(path(sub))) {
      if (e.is_regular_file()) found.push_back(fs::relative(e.path(), dir_).generic_string());
    }
    std::sort(found.begin(), found.end());
    for (const auto& f : found) add(f);
  }

  void manifest(const std::string& command, const std::string& config_hash, std::uint64_t seed) {
    json artifacts = json::array();
    for (const auto& f : files_) artifacts.push_back({{"path", f}, {"sha256", sha256_file(path(f))}});
    json m = {{"command", command},
              {"config_hash", config_hash},
              {"seed", seed},
              {"versions",
               {{"mmsc", kLibraryVersion},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
              {"artifacts", artifacts}};
    write_text(path("run-manifest.json"), m.dump(2) + "\n");
  }

  std::size_t count() const { return files_.size(); }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

std::string read_file(const fs::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + file.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Seed precedence: command line, then the config file, then 0.
RunConfig load_run_config(const std::string& file, const std::optional<std::uint64_t>& seed) {
  if (!fs::exists(file)) throw ConfigError("config not found: " + file);
  json j = parse_json_text(read_file(file), file);
  if (seed && j.is_object()) j["seed"] = *seed;
  return run_config_from_json(j, fs::path(file).parent_path());
}

std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return json_fingerprint(j);
}

fs::path resolve_out(const std::string& flag, const RunConfig* cfg) {
  if (!flag.empty()) return flag;
  if (cfg && !cfg->output_dir.empty()) return cfg->output_dir;
  throw ConfigError("--out is required (or set output_dir in the config)");
}

json metrics_json(const MetricSet& m) { return {{"acc", m.acc}, {"ari", m.ari}, {"nmi", m.nmi}}; }

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string preset = "fixture";
  std::optional<std::size_t> clusters, per_cluster, side, modalities, shared_dim, private_dim;
  std::optional<double> noise;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  SyntheticSpec spec = SyntheticSpec::fixture();
  if (a.clusters) spec.clusters = *a.clusters;
  if (a.per_cluster) spec.per_cluster = *a.per_cluster;
  if (a.side) spec.side = *a.side;
  if (a.modalities) spec.modalities = *a.modalities;
  if (a.shared_dim) spec.shared_dim = *a.shared_dim;
  if (a.private_dim) spec.private_dim = *a.private_dim;
  if (a.noise) spec.noise_sigma = *a.noise;
  spec.seed = a.seed.value_or(0);
  spec.validate();

  const SyntheticDataset ds = gen_synthetic(spec);
  Outputs o(a.out);
  save_synthetic(ds, o.dir());
  o.add_tree("learning");
  o.add_tree("validation");
  const json spec_json = {{"preset", a.preset},
                          {"clusters", spec.clusters},
                          {"per_cluster", spec.per_cluster},
                          {"side", spec.side},
                          {"modalities", spec.modalities},
                          {"shared_dim", spec.shared_dim},
                          {"private_dim", spec.private_dim},
                          {"noise_sigma", spec.noise_sigma},
                          {"seed", spec.seed}};
  o.json_file("spec.json", spec_json);
  o.manifest("gen", json_fingerprint(spec_json), spec.seed);
  out << "gen: " << ds.learning.num_samples() << " learning + " << ds.validation.num_samples()
      << " validation samples, " << spec.modalities << " modalities -> " << o.dir().string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::string resume;
  std::string out;
};

json model_identity(ModelConfig c) {
  c.pretrain_epochs = 0;
  c.finetune_epochs = 0;
  return to_json(c);
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(a.config, a.seed);
  if (a.variant) cfg.model.variant = variant_from_string(*a.variant);
  const ModalityDataset learning = load_splits(cfg.dataset).learning;
  Outputs o(resolve_out(a.out, &cfg));

  MultiBranchAutoencoder model;
  TrainState state;
  std::size_t resumed_at = 0;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw ConfigError("checkpoint not found: " + a.resume);
    Checkpoint ck = load_checkpoint(a.resume);
    if (model_identity(ck.model.config) != model_identity(cfg.model)) {
      throw ConfigError("checkpoint " + a.resume + " was trained with a different model configuration");
    }
    if (ck.model.samples != learning.num_samples()) {
      throw ConfigError("checkpoint expects " + std::to_string(ck.model.samples) + " samples, dataset has " +
                        std::to_string(learning.num_samples()));
    }
    model = std::move(ck.model);
    state = std::move(ck.state);
    model.config.pretrain_epochs = cfg.model.pretrain_epochs;
    model.config.finetune_epochs = cfg.model.finetune_epochs;
    resumed_at = state.epochs_done;
  } else {
    model = build_model(cfg.model, learning.num_samples());
    state = make_train_state(model);
  }
  train(model, learning, state);

  save_checkpoint(o.path("checkpoint.bin"), model, state);
  o.add("checkpoint.bin");
  std::string trace = "epoch,phase,loss\n";
  for (std::size_t e = 0; e < state.loss_trace.size(); ++e) {
    trace += std::to_string(e) + "," + (e < model.config.pretrain_epochs ? "pretrain" : "finetune") + "," +
             fmt(state.loss_trace[e]) + "\n";
  }
  o.text("loss_trace.csv", trace);
  o.json_file("train.json", {{"variant", to_string(model.config.variant)},
                             {"samples", model.samples},
                             {"epochs_done", state.epochs_done},
                             {"pretrain_epochs", model.config.pretrain_epochs},
                             {"finetune_epochs", model.config.finetune_epochs},
                             {"resumed_at_epoch", resumed_at},
                             {"final_loss", state.loss_trace.empty() ? json(nullptr) : json(state.loss_trace.back())},
                             {"warnings", state.warnings}});
  o.manifest("train", config_hash(cfg), cfg.seed);
  for (const auto& w : state.warnings) err << "warning: " << w << "\n";
  out << "train: " << to_string(model.config.variant) << ", " << state.epochs_done << " epochs, final loss "
      << (state.loss_trace.empty() ? std::string("n/a") : fmt(state.loss_trace.back())) << " -> "
      << o.dir().string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ClusterArgs {
  std::string checkpoint;
  std::string dataset;
  std::string config;
  std::optional<std::size_t> clusters;
  std::optional<std::uint64_t> seed;
  bool write_affinity = false;
  std::string out;
};

int cmd_cluster(const ClusterArgs& a, std::ostream& out) {
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  std::optional<RunConfig> cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config, a.seed);
  fs::path dataset = a.dataset;
  if (dataset.empty()) {
    if (!cfg) throw ConfigError("--dataset or --config is required");
    dataset = cfg->dataset;
  }
  if (!fs::exists(dataset)) throw ConfigError("dataset not found: " + dataset.string());

  PipelineOptions options = cfg ? cfg->options : PipelineOptions{};
  if (a.clusters) options.clusters = *a.clusters;
  const std::uint64_t seed = a.seed ? *a.seed : cfg ? cfg->seed : 0;

  Checkpoint ck = load_checkpoint(a.checkpoint);
  const SyntheticDataset data = load_splits(dataset);
  if (data.learning.num_samples() != ck.model.samples) {
    throw ConfigError("checkpoint expects " + std::to_string(ck.model.samples) + " samples, dataset has " +
                      std::to_string(data.learning.num_samples()));
  }
  Outputs o(resolve_out(a.out, cfg ? &*cfg : nullptr));
  const TrainedRun run = cluster_trained(std::move(ck.model), {ck.state.loss_trace, ck.state.warnings},
                                         data.learning, options, seed);

  write_labels_csv(o.path("labels.csv"), run.labels);
  o.add("labels.csv");
  if (a.write_affinity) {
    write_matrix_csv(o.path("affinity.csv"), run.affinity);
    o.add("affinity.csv");
  }
  json metrics = {{"samples", run.labels.size()}, {"clusters", resolve_clusters(options, data.learning)}};
  for (const char* k : {"acc", "ari", "nmi"}) metrics[k] = nullptr;
  if (run.learning_metrics) metrics.update(metrics_json(*run.learning_metrics));
  metrics["validation"] = nullptr;
  if (data.validation.num_modalities() > 0 && data.validation.num_samples() > 0) {
    const auto pred = classify_dataset(run, data.validation, {}, options);
    json v = {{"samples", pred.size()}};
    if (data.validation.has_labels()) v.update(metrics_json(score_labels(pred, data.validation.labels)));
    metrics["validation"] = v;
  }
  o.json_file("metrics.json", metrics);

  json hash_src = {{"checkpoint", sha256_file(a.checkpoint)}, {"options", to_json(options)}, {"seed", seed}};
  hash_src["config"] = cfg ? json(config_hash(*cfg)) : json(nullptr);
  o.manifest("cluster", json_fingerprint(hash_src), seed);
  out << "cluster: " << run.labels.size() << " samples";
  if (run.learning_metrics) out << ", acc " << fmt(run.learning_metrics->acc);
  out << " -> " << o.dir().string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ExperimentArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
};

int cmd_experiment(const ExperimentArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(a.config, a.seed);
  Outputs o(resolve_out(a.out, &cfg));
  ExperimentReport report;
  if (!cfg.scenarios.empty()) {
    const SyntheticDataset data = load_splits(cfg.dataset);
    RunCache cache;
    report = run_experiment(data, {cfg.model, cfg.options, cfg.variants, cfg.scenarios}, cache,
                            std::max<std::size_t>(a.jobs, 1));
  }
  o.text("experiment.csv", to_csv(report));
  o.json_file("experiment.json", to_json(report));
  o.manifest("experiment", config_hash(cfg), cfg.seed);
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";
  out << "experiment: " << cfg.scenarios.size() << " scenarios, " << report.rows.size() << " rows -> "
      << o.dir().string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BoundsArgs {
  std::string clean;
  std::string perturbed;
  std::optional<std::size_t> clusters;
  std::size_t sweep = 20;
  std::size_t samples = 60;
  double scale = 0.25;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_bounds(const BoundsArgs& a, std::ostream& out) {
  const std::uint64_t seed = a.seed.value_or(0);
  if (!a.perturbed.empty() && a.clean.empty()) throw ConfigError("--perturbed needs --clean");
  if (!a.clean.empty() && !a.clusters) throw ConfigError("--clusters is required with --clean");
  const std::size_t clusters = a.clusters.value_or(4);

  std::vector<PerturbationReport> reports;
  json params;
  if (!a.perturbed.empty()) {
    reports.push_back(perturbation_report(read_matrix_csv(a.clean), read_matrix_csv(a.perturbed), clusters));
    params = {{"mode", "pair"}, {"clean", sha256_file(a.clean)}, {"perturbed", sha256_file(a.perturbed)}};
  } else {
    const Matrix clean = a.clean.empty() ? planted_affinity(a.samples, clusters, seed) : read_matrix_csv(a.clean);
    reports = perturbation_sweep(clean, clusters, a.sweep, a.scale, seed);
    params = {{"mode", "sweep"},
              {"clean", a.clean.empty() ? json("planted") : json(sha256_file(a.clean))},
              {"samples", clean.rows()},
              {"count", a.sweep},
              {"scale", a.scale}};
  }
  params["clusters"] = clusters;
  params["seed"] = seed;

  std::size_t frob_fail = 0, proj_fail = 0, degenerate = 0;
  json list = json::array();
  for (const auto& r : reports) {
    if (!r.frob_bound_holds) ++frob_fail;
    if (r.gap_degenerate) {
      ++degenerate;
    } else if (!r.projector_bound_holds) {
      ++proj_fail;
    }
    list.push_back(to_json(r));
  }
  Outputs o(a.out);
  o.json_file("bounds.json", {{"parameters", params},
                              {"reports", list},
                              {"summary",
                               {{"count", reports.size()},
                                {"frobenius_violations", frob_fail},
                                {"projector_violations", proj_fail},
                                {"gap_degenerate", degenerate}}}});
  o.manifest("bounds", json_fingerprint(params), seed);
  out << "bounds: " << reports.size() << " checks, " << frob_fail << " frobenius and " << proj_fail
      << " projector violations, " << degenerate << " gap-degenerate -> " << o.dir().string() << "\n";
  return frob_fail + proj_fail == 0 ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::vector<std::string> variants;
  std::optional<std::uint64_t> seed;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::string inject_bug;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  std::vector<Variant> variants;
  for (const auto& v : a.variants) variants.push_back(variant_from_string(v));
  if (variants.empty()) variants = {Variant::drogsure, Variant::dmsc, Variant::concat};
  const std::uint64_t seed = a.seed.value_or(0);

  GradCheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.step = a.step;
  if (!a.inject_bug.empty()) opt.inject_bug = a.inject_bug;

  bool all = true;
  std::size_t failed = 0, blocks = 0;
  json list = json::array();
  for (Variant v : variants) {
    GradCheckToy toy = make_gradcheck_toy(v, seed);
    json entries = json::array();
    bool ok = true;
    for (const auto& e : gradient_check(toy.model, toy.data, opt)) {
      entries.push_back({{"block", e.block},
                         {"coordinates", e.coordinates},
                         {"max_abs_error", e.max_abs_error},
                         {"rel_error", e.rel_error},
                         {"passed", e.passed}});
      ok = ok && e.passed;
      ++blocks;
      if (!e.passed) ++failed;
    }
    all = all && ok;
    list.push_back({{"variant", to_string(v)}, {"passed", ok}, {"blocks", entries}});
  }
  const json params = {{"seed", seed}, {"tolerance", a.tolerance}, {"step", a.step},
                       {"inject_bug", a.inject_bug.empty() ? json(nullptr) : json(a.inject_bug)}};
  Outputs o(a.out);
  o.json_file("gradcheck.json", {{"parameters", params}, {"variants", list}, {"passed", all}});
  o.manifest("gradcheck", json_fingerprint(params), seed);
  out << "gradcheck: " << blocks << " blocks, " << failed << " failed -> " << o.dir().string() << "\n";
  return all ? kExitOk : kExitRuntime;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal deep subspace clustering"};
  app.name("mmsc");
  app.require_subcommand(1);
  app.set_version_flag("--version", kLibraryVersion);

  auto seed_opt = [](CLI::App* c, std::optional<std::uint64_t>& s) {
    c->add_option("--seed", s, "Seed (overrides the config seed; default 0)");
  };

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write a synthetic multimodal dataset");
  g->add_option("--preset", gen.preset, "Base spec")->check(CLI::IsMember({"fixture"}));
  g->add_option("--clusters", gen.clusters);
  g->add_option("--per-cluster", gen.per_cluster);
  g->add_option("--side", gen.side, "Image side length");
  g->add_option("--modalities", gen.modalities);
  g->add_option("--shared-dim", gen.shared_dim);
  g->add_option("--private-dim", gen.private_dim);
  g->add_option("--noise", gen.noise, "Noise standard deviation");
  seed_opt(g, gen.seed);
  g->add_option("--out", gen.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint and loss trace");
  t->add_option("--config", tr.config)->required();
  t->add_option("--variant", tr.variant)->check(CLI::IsMember({"drogsure", "dmsc", "concat"}));
  t->add_option("--resume", tr.resume, "Continue from a checkpoint");
  seed_opt(t, tr.seed);
  t->add_option("--out", tr.out);

  ClusterArgs cl;
  auto* c = app.add_subcommand("cluster", "Cluster with a trained checkpoint");
  c->add_option("--checkpoint", cl.checkpoint)->required();
  c->add_option("--dataset", cl.dataset);
  c->add_option("--config", cl.config);
  c->add_option("--clusters", cl.clusters);
  c->add_flag("--write-affinity", cl.write_affinity, "Also write affinity.csv");
  seed_opt(c, cl.seed);
  c->add_option("--out", cl.out);

  ExperimentArgs ex;
  auto* e = app.add_subcommand("experiment", "Run the scenario sweeps of a config");
  e->add_option("--config", ex.config)->required();
  e->add_option("--jobs", ex.jobs, "Parallel training cells")->check(CLI::PositiveNumber);
  seed_opt(e, ex.seed);
  e->add_option("--out", ex.out);

  BoundsArgs bd;
  auto* b = app.add_subcommand("bounds", "Check the affinity perturbation bounds");
  b->add_option("--clean", bd.clean, "Clean affinity CSV");
  b->add_option("--perturbed", bd.perturbed, "Perturbed affinity CSV");
  b->add_option("--clusters", bd.clusters);
  b->add_option("--sweep", bd.sweep, "Number of random perturbations");
  b->add_option("--samples", bd.samples, "Size of the planted affinity");
  b->add_option("--scale", bd.scale, "Perturbation size as a fraction of the spectral gap");
  seed_opt(b, bd.seed);
  b->add_option("--out", bd.out)->required();

  GradcheckArgs gc;
  auto* k = app.add_subcommand("gradcheck", "Finite-difference check of backprop on a toy model");
  k->add_option("--variant", gc.variants)->check(CLI::IsMember({"drogsure", "dmsc", "concat"}));
  k->add_option("--tolerance", gc.tolerance);
  k->add_option("--step", gc.step);
  k->add_option("--inject-bug", gc.inject_bug, "Test hook: corrupt one block's analytic gradient");
  seed_opt(k, gc.seed);
  k->add_option("--out", gc.out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex_) {
    return app.exit(ex_, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (t->parsed()) return cmd_train(tr, out, err);
    if (c->parsed()) return cmd_cluster(cl, out);
    if (e->parsed()) return cmd_experiment(ex, out, err);
    if (b->parsed()) return cmd_bounds(bd, out);
    if (k->parsed()) return cmd_gradcheck(gc, out);
  } catch (const ConfigError& x) {
    err << "error: " << x.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mmsc::cli
