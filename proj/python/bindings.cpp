#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "mmsc/admm.hpp"
#include "mmsc/config.hpp"
#include "mmsc/errors.hpp"
#include "mmsc/objectives.hpp"
#include "mmsc/version.hpp"

namespace py = pybind11;
using namespace mmsc;

namespace {

py::dict dataset_dict(const ModalityDataset& d) {
  py::dict out;
  out["modalities"] = d.modalities;
  out["labels"] = d.labels;
  out["height"] = d.height;
  out["width"] = d.width;
  out["split"] = to_string(d.split);
  return out;
}

ModalityDataset make_dataset(const std::vector<Matrix>& modalities, const std::vector<int>& labels,
                             std::size_t height, std::size_t width) {
  ModalityDataset d;
  d.modalities = modalities;
  d.labels = labels;
  d.height = height;
  d.width = width;
  d.validate();
  return d;
}

py::dict metrics_dict(const MetricSet& m) {
  py::dict out;
  out["acc"] = m.acc;
  out["ari"] = m.ari;
  out["nmi"] = m.nmi;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal deep subspace clustering core";
  m.attr("__version__") = kLibraryVersion;

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<InvariantError>(m, "InvariantError", PyExc_ValueError);

  m.def(
      "gen_synthetic",
      [](std::size_t clusters, std::size_t per_cluster, std::size_t side, std::size_t modalities,
         std::size_t shared_dim, std::size_t private_dim, double noise, std::uint64_t seed) {
        SyntheticSpec s{clusters, per_cluster, side, modalities, shared_dim, private_dim, noise, seed};
        s.validate();
        const SyntheticDataset ds = gen_synthetic(s);
        py::dict out;
        out["learning"] = dataset_dict(ds.learning);
        out["validation"] = dataset_dict(ds.validation);
        return out;
      },
      py::arg("clusters") = 4, py::arg("per_cluster") = 40, py::arg("side") = 8, py::arg("modalities") = 3,
      py::arg("shared_dim") = 3, py::arg("private_dim") = 2, py::arg("noise") = 0.01, py::arg("seed") = 0,
      "Synthetic union-of-subspaces dataset split into learning and validation sets.");

  m.def(
      "load_splits",
      [](const std::string& dir) {
        const SyntheticDataset ds = load_splits(dir);
        py::dict out;
        out["learning"] = dataset_dict(ds.learning);
        out["validation"] = ds.validation.num_modalities() ? py::object(dataset_dict(ds.validation)) : py::none();
        return out;
      },
      py::arg("path"));

  m.def("prox_group", [](const std::vector<Matrix>& group, double beta) { return prox_group(group, beta); },
        py::arg("group"), py::arg("beta"), "Group soft-threshold across modalities, entry by entry.");
  m.def("shrink_l1", &shrink_l1, py::arg("b"), py::arg("tau"));
  m.def("group_l12_norm", [](const std::vector<Matrix>& group) { return group_l12_norm(group); }, py::arg("group"));
  m.def("commutator", &commutator, py::arg("a"), py::arg("b"));
  m.def("commutator_penalty", [](const std::vector<Matrix>& group) { return commutator_penalty(group); },
        py::arg("group"));

  m.def(
      "admm_run",
      [](const std::vector<Matrix>& features, double rho, double lambda_group, double lambda_comm, double mu0,
         double growth, std::size_t max_iterations, double tol) {
        AdmmConfig c;
        c.rho = rho;
        c.lambda_group = lambda_group;
        c.lambda_comm = lambda_comm;
        c.mu0 = mu0;
        c.growth = growth;
        c.max_iterations = max_iterations;
        c.tol = tol;
        AdmmReport r;
        {
          py::gil_scoped_release release;
          r = admm_run(features, c);
        }
        py::dict out;
        out["iterations"] = r.iterations;
        out["omega"] = r.omega;
        out["max_relative_residual"] = r.max_relative_residual;
        out["commutator_trace"] = r.commutator_trace;
        return out;
      },
      py::arg("features"), py::arg("rho") = 0.01, py::arg("lambda_group") = 1.0, py::arg("lambda_comm") = 1.0,
      py::arg("mu0") = 1.0, py::arg("growth") = 1.05, py::arg("max_iterations") = 500, py::arg("tol") = 1e-6,
      "Linearized ADMM on fixed features (rows are samples).");

  m.def("fuse_coefficients", [](const std::vector<Matrix>& w) { return fuse_coefficients(w); }, py::arg("omega"));
  m.def("build_affinity", &build_affinity, py::arg("w_total"), py::arg("keep_top_q") = 0);
  m.def(
      "spectral_cluster",
      [](const Matrix& a, std::size_t clusters, std::uint64_t seed) { return spectral_cluster(a, clusters, seed); },
      py::arg("affinity"), py::arg("clusters"), py::arg("seed") = 0);
  m.def("cluster_accuracy",
        [](const std::vector<int>& pred, const std::vector<int>& truth) { return cluster_accuracy(pred, truth); },
        py::arg("pred"), py::arg("truth"));
  m.def(
      "score_labels",
      [](const std::vector<int>& pred, const std::vector<int>& truth) { return metrics_dict(score_labels(pred, truth)); },
      py::arg("pred"), py::arg("truth"), "ACC, ARI and NMI of predicted against true labels.");

  m.def(
      "perturbation_report",
      [](const Matrix& clean, const Matrix& perturbed, std::size_t clusters) {
        const PerturbationReport r = perturbation_report(clean, perturbed, clusters);
        py::dict out;
        out["frob_distance"] = r.frob_distance;
        out["max_entry_delta"] = r.max_entry_delta;
        out["bound_n_eps"] = r.bound_n_eps;
        out["projector_distance"] = r.projector_distance;
        out["spectral_gap"] = r.spectral_gap;
        out["bound_rhs"] = r.bound_rhs;
        out["frob_bound_holds"] = r.frob_bound_holds;
        out["projector_bound_holds"] = r.projector_bound_holds;
        out["gap_degenerate"] = r.gap_degenerate;
        return out;
      },
      py::arg("clean"), py::arg("perturbed"), py::arg("clusters"));

  m.def(
      "gradient_check",
      [](const std::string& variant, std::uint64_t seed, double tolerance) {
        GradCheckToy toy = make_gradcheck_toy(variant_from_string(variant), seed);
        GradCheckOptions o;
        o.tolerance = tolerance;
        py::list out;
        for (const auto& e : gradient_check(toy.model, toy.data, o)) {
          py::dict d;
          d["block"] = e.block;
          d["rel_error"] = e.rel_error;
          d["max_abs_error"] = e.max_abs_error;
          d["passed"] = e.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("variant") = "drogsure", py::arg("seed") = 0, py::arg("tolerance") = 1e-4);

  m.def(
      "train_and_cluster",
      [](const std::vector<Matrix>& modalities, const std::vector<int>& labels, std::size_t height,
         std::size_t width, const std::string& model_json, std::size_t clusters, std::uint64_t seed) {
        const ModalityDataset data = make_dataset(modalities, labels, height, width);
        const ModelConfig model = model_config_from_json(parse_json_text(model_json, "model"));
        PipelineOptions options;
        options.clusters = clusters;
        TrainedRun run;
        {
          py::gil_scoped_release release;
          run = train_and_cluster(data, model, options, seed);
        }
        py::dict out;
        out["labels"] = run.labels;
        out["affinity"] = run.affinity;
        out["loss_trace"] = run.training.loss_trace;
        out["warnings"] = run.training.warnings;
        out["metrics"] = run.learning_metrics ? py::object(metrics_dict(*run.learning_metrics)) : py::none();
        return out;
      },
      py::arg("modalities"), py::arg("labels"), py::arg("height"), py::arg("width"), py::arg("model_json") = "{}",
      py::arg("clusters") = 0, py::arg("seed") = 0,
      "Train a model on the given modalities and cluster its fused affinity.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a command-line subcommand in process; returns (exit_code, stdout, stderr).");
}
