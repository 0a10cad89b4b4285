#include "mmsc/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace mmsc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Collects every problem instead of stopping at the first one.
class Reader {
 public:
  std::vector<std::string> errors;

  void keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (!allowed.count(it.key())) errors.push_back(where + it.key() + ": unknown key");
    }
  }

  bool object(const json& j, const std::string& where) {
    if (j.is_object()) return true;
    errors.push_back(where + ": expected an object");
    return false;
  }

  void read(const json& obj, const std::string& key, double& out, const std::string& where) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (v.is_number()) {
      out = v.get<double>();
    } else {
      errors.push_back(where + key + ": expected a number");
    }
  }

  void read(const json& obj, const std::string& key, std::uint64_t& out, const std::string& where) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      out = v.get<std::uint64_t>();
    } else {
      errors.push_back(where + key + ": expected a nonnegative integer");
    }
  }

  void read(const json& obj, const std::string& key, bool& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (obj.at(key).is_boolean()) {
      out = obj.at(key).get<bool>();
    } else {
      errors.push_back(where + key + ": expected true or false");
    }
  }

  void read(const json& obj, const std::string& key, std::string& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (obj.at(key).is_string()) {
      out = obj.at(key).get<std::string>();
    } else {
      errors.push_back(where + key + ": expected a string");
    }
  }

  void read_indices(const json& obj, const std::string& key, std::vector<std::size_t>& out,
                    const std::string& where) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_array()) {
      errors.push_back(where + key + ": expected an array of indices");
      return;
    }
    out.clear();
    for (const auto& e : v) {
      if (e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0)) {
        out.push_back(e.get<std::size_t>());
      } else {
        errors.push_back(where + key + ": expected nonnegative integers");
        return;
      }
    }
  }

  // Applies a parser that may throw ConfigError, recording the message.
  template <class F>
  void guard(const std::string& where, F&& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      errors.push_back(where + ": " + e.what());
    }
  }
};

[[noreturn]] void throw_all(const std::string& what, const std::vector<std::string>& errors) {
  std::ostringstream os;
  os << what << ":";
  for (const auto& e : errors) os << "\n  " << e;
  throw ConfigError(os.str());
}

json snr_to_json(double snr) {
  if (std::isinf(snr)) return snr > 0 ? json("inf") : json("-inf");
  return snr;
}

const std::set<std::string> kModelKeys = {"variant",        "modalities",     "height",          "width",
                                          "encoder",        "hyper",          "learning_rate",   "coefficient_init",
                                          "pretrain_epochs", "finetune_epochs", "seed"};
const std::set<std::string> kHyperKeys = {"gamma", "rho", "mu", "lambda_group", "lambda_comm", "lambda_frobenius"};
const std::set<std::string> kLayerKeys = {"filters", "kernel", "activation"};
const std::set<std::string> kScenarioKeys = {"name",      "kind",          "targets", "snr_db",
                                             "phase",     "available",     "sweep_subsets", "seeds"};
const std::set<std::string> kPipelineKeys = {"clusters", "subspace_dim", "variance_fraction", "classify_on_latent",
                                             "affinity_top_q", "kmeans_restarts", "kmeans_max_iterations"};

void read_model(Reader& r, const json& j, ModelConfig& c) {
  if (j.contains("variant")) {
    std::string v;
    r.read(j, "variant", v, "");
    r.guard("variant", [&] { c.variant = variant_from_string(v); });
  }
  r.read(j, "modalities", c.modalities, "");
  r.read(j, "height", c.height, "");
  r.read(j, "width", c.width, "");
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    if (e.is_string()) {
      const auto name = e.get<std::string>();
      if (name == "arl") {
        c.encoder_layers = arl_encoder();
      } else if (name == "eyb") {
        c.encoder_layers = eyb_encoder();
      } else {
        r.errors.push_back("encoder: unknown preset '" + name + "' (expected arl, eyb or a layer list)");
      }
    } else if (e.is_array()) {
      c.encoder_layers.clear();
      for (std::size_t i = 0; i < e.size(); ++i) {
        const std::string where = "encoder[" + std::to_string(i) + "].";
        LayerSpec l;
        if (!r.object(e[i], "encoder[" + std::to_string(i) + "]")) continue;
        r.keys(e[i], kLayerKeys, where);
        r.read(e[i], "filters", l.filters, where);
        r.read(e[i], "kernel", l.kernel, where);
        std::string act = to_string(l.activation);
        r.read(e[i], "activation", act, where);
        r.guard(where + "activation", [&] { l.activation = activation_from_string(act); });
        c.encoder_layers.push_back(l);
      }
    } else {
      r.errors.push_back("encoder: expected a preset name or a list of layers");
    }
  }
  if (j.contains("hyper") && r.object(j.at("hyper"), "hyper")) {
    const json& h = j.at("hyper");
    r.keys(h, kHyperKeys, "hyper.");
    r.read(h, "gamma", c.hyper.gamma, "hyper.");
    r.read(h, "rho", c.hyper.rho, "hyper.");
    r.read(h, "mu", c.hyper.mu, "hyper.");
    r.read(h, "lambda_group", c.hyper.lambda_group, "hyper.");
    r.read(h, "lambda_comm", c.hyper.lambda_comm, "hyper.");
    r.read(h, "lambda_frobenius", c.hyper.lambda_frobenius, "hyper.");
  }
  r.read(j, "learning_rate", c.learning_rate, "");
  r.read(j, "coefficient_init", c.coefficient_init, "");
  r.read(j, "pretrain_epochs", c.pretrain_epochs, "");
  r.read(j, "finetune_epochs", c.finetune_epochs, "");
  r.read(j, "seed", c.seed, "");
}

Scenario read_scenario(Reader& r, const json& j, const std::string& where) {
  Scenario s;
  if (!r.object(j, where)) return s;
  const std::string w = where + ".";
  r.keys(j, kScenarioKeys, w);
  r.read(j, "name", s.name, w);
  if (j.contains("kind")) {
    std::string k;
    r.read(j, "kind", k, w);
    r.guard(w + "kind", [&] { s.kind = corruption_from_string(k); });
  }
  r.read_indices(j, "targets", s.targets, w);
  if (j.contains("snr_db")) {
    const json& v = j.at("snr_db");
    if (v.is_number()) {
      s.snr_db = v.get<double>();
    } else if (v.is_string() && (v.get<std::string>() == "inf" || v.get<std::string>() == "+inf")) {
      s.snr_db = std::numeric_limits<double>::infinity();
    } else {
      r.errors.push_back(w + "snr_db: expected a number or \"inf\"");
    }
  }
  if (j.contains("phase")) {
    std::string p;
    r.read(j, "phase", p, w);
    r.guard(w + "phase", [&] { s.phase = phase_from_string(p); });
  }
  r.read_indices(j, "available", s.available, w);
  r.read(j, "sweep_subsets", s.sweep_subsets, w);
  if (j.contains("seeds")) {
    const json& v = j.at("seeds");
    if (v.is_array()) {
      s.seeds.clear();
      for (const auto& e : v) {
        if (e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0)) {
          s.seeds.push_back(e.get<std::uint64_t>());
        } else {
          r.errors.push_back(w + "seeds: expected nonnegative integers");
          break;
        }
      }
    } else {
      r.errors.push_back(w + "seeds: expected an array");
    }
  }
  return s;
}

struct DatasetShape {
  std::size_t modalities = 0, height = 0, width = 0;
};

DatasetShape peek_dataset(const fs::path& dir) {
  fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) manifest = dir / "learning" / "manifest.json";
  if (!fs::exists(manifest)) throw IoError("no dataset manifest under " + dir.string());
  std::ifstream in(manifest);
  json m = json::parse(in, nullptr, false);
  if (m.is_discarded()) throw IoError(manifest.string() + ": not valid JSON");
  try {
    return {m.at("modalities").get<std::size_t>(), m.at("height").get<std::size_t>(), m.at("width").get<std::size_t>()};
  } catch (const json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  json layers = json::array();
  for (const auto& l : c.encoder_layers) {
    layers.push_back({{"filters", l.filters}, {"kernel", l.kernel}, {"activation", to_string(l.activation)}});
  }
  return {{"variant", to_string(c.variant)},
          {"modalities", c.modalities},
          {"height", c.height},
          {"width", c.width},
          {"encoder", layers},
          {"hyper",
           {{"gamma", c.hyper.gamma},
            {"rho", c.hyper.rho},
            {"mu", c.hyper.mu},
            {"lambda_group", c.hyper.lambda_group},
            {"lambda_comm", c.hyper.lambda_comm},
            {"lambda_frobenius", c.hyper.lambda_frobenius}}},
          {"learning_rate", c.learning_rate},
          {"coefficient_init", c.coefficient_init},
          {"pretrain_epochs", c.pretrain_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  Reader r;
  ModelConfig c;
  if (r.object(j, "model")) {
    r.keys(j, kModelKeys, "");
    read_model(r, j, c);
  }
  if (r.errors.empty()) r.guard("model", [&] { c.validate_shapes(); });
  if (!r.errors.empty()) throw_all("invalid model config", r.errors);
  return c;
}

json to_json(const PipelineOptions& o) {
  json j = {{"clusters", o.clusters},
            {"variance_fraction", o.variance_fraction},
            {"classify_on_latent", o.classify_on_latent},
            {"affinity_top_q", o.affinity_top_q},
            {"kmeans_restarts", o.spectral.restarts},
            {"kmeans_max_iterations", o.spectral.max_iterations}};
  j["subspace_dim"] = o.subspace_dim ? json(*o.subspace_dim) : json(nullptr);
  return j;
}

json to_json(const Scenario& s) {
  return {{"name", s.name},
          {"kind", to_string(s.kind)},
          {"targets", s.targets},
          {"snr_db", snr_to_json(s.snr_db)},
          {"phase", to_string(s.phase)},
          {"available", s.available},
          {"sweep_subsets", s.sweep_subsets},
          {"seeds", s.seeds}};
}

json to_json(const RunConfig& c) {
  json j = to_json(c.model);
  json variants = json::array();
  for (auto v : c.variants) variants.push_back(to_string(v));
  j["variants"] = variants;
  j["dataset"] = c.dataset.string();
  const json options = to_json(c.options);
  for (auto& [k, v] : options.items()) j[k] = v;
  json scenarios = json::array();
  for (const auto& s : c.scenarios) scenarios.push_back(to_json(s));
  j["scenarios"] = scenarios;
  j["output_dir"] = c.output_dir.string();
  return j;
}

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  Reader r;
  RunConfig c;
  if (!r.object(j, "config")) throw_all("invalid config", r.errors);

  std::set<std::string> allowed = kModelKeys;
  allowed.insert(kPipelineKeys.begin(), kPipelineKeys.end());
  allowed.insert({"variants", "dataset", "scenarios", "output_dir"});
  r.keys(j, allowed, "");

  read_model(r, j, c.model);
  c.seed = c.model.seed;

  if (j.contains("variants")) {
    const json& v = j.at("variants");
    if (v.is_array()) {
      for (const auto& e : v) {
        if (!e.is_string()) {
          r.errors.push_back("variants: expected strings");
          break;
        }
        r.guard("variants", [&] { c.variants.push_back(variant_from_string(e.get<std::string>())); });
      }
    } else {
      r.errors.push_back("variants: expected an array");
    }
  }
  if (c.variants.empty()) c.variants.push_back(c.model.variant);

  r.read(j, "clusters", c.options.clusters, "");
  if (j.contains("subspace_dim") && !j.at("subspace_dim").is_null()) {
    std::size_t d = 0;
    r.read(j, "subspace_dim", d, "");
    if (d == 0) r.errors.push_back("subspace_dim: must be positive (or null for automatic)");
    c.options.subspace_dim = d;
  }
  r.read(j, "variance_fraction", c.options.variance_fraction, "");
  if (!(c.options.variance_fraction > 0.0 && c.options.variance_fraction <= 1.0)) {
    r.errors.push_back("variance_fraction: must lie in (0, 1]");
  }
  r.read(j, "classify_on_latent", c.options.classify_on_latent, "");
  r.read(j, "affinity_top_q", c.options.affinity_top_q, "");
  r.read(j, "kmeans_restarts", c.options.spectral.restarts, "");
  r.read(j, "kmeans_max_iterations", c.options.spectral.max_iterations, "");
  if (c.options.spectral.restarts == 0) r.errors.push_back("kmeans_restarts: must be positive");
  if (c.options.clusters == 1) r.errors.push_back("clusters: need at least 2 (or 0 to infer from labels)");

  std::string out_dir;
  r.read(j, "output_dir", out_dir, "");
  if (!out_dir.empty()) c.output_dir = fs::path(out_dir).is_absolute() ? fs::path(out_dir) : base_dir / out_dir;

  std::string dataset;
  if (!j.contains("dataset")) {
    r.errors.push_back("dataset: required");
  } else {
    r.read(j, "dataset", dataset, "");
  }
  if (!dataset.empty()) {
    c.dataset = fs::path(dataset).is_absolute() ? fs::path(dataset) : fs::weakly_canonical(base_dir / dataset);
    if (!fs::exists(c.dataset)) {
      r.errors.push_back("dataset: path does not exist: " + c.dataset.string());
    } else {
      try {
        const DatasetShape shape = peek_dataset(c.dataset);
        auto agree = [&](const char* key, std::size_t declared, std::size_t actual, std::size_t& field) {
          if (j.contains(key) && declared != actual) {
            r.errors.push_back(std::string(key) + ": config says " + std::to_string(declared) + ", dataset has " +
                               std::to_string(actual));
          }
          field = actual;
        };
        agree("modalities", c.model.modalities, shape.modalities, c.model.modalities);
        agree("height", c.model.height, shape.height, c.model.height);
        agree("width", c.model.width, shape.width, c.model.width);
      } catch (const IoError& e) {
        r.errors.push_back(std::string("dataset: ") + e.what());
      }
    }
  }

  if (j.contains("scenarios")) {
    const json& v = j.at("scenarios");
    if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string where = "scenarios[" + std::to_string(i) + "]";
        Scenario s = read_scenario(r, v[i], where);
        if (v[i].is_object() && !v[i].contains("seeds")) s.seeds = {c.seed};
        r.guard(where, [&] { s.validate(c.model.modalities); });
        c.scenarios.push_back(std::move(s));
      }
    } else {
      r.errors.push_back("scenarios: expected an array");
    }
  }

  r.guard("model", [&] { c.model.validate(); });
  if (!r.errors.empty()) throw_all("invalid config", r.errors);
  return c;
}

json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error: " +
                      e.what());
  }
}

RunConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const json j = parse_json_text(ss.str(), file.string());
  return run_config_from_json(j, file.has_parent_path() ? file.parent_path() : fs::path("."));
}

std::string dump_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

std::string json_fingerprint(const json& j) { return sha256_hex(j.dump()).substr(0, 16); }

}  // namespace mmsc
