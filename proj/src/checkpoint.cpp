#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mmsc/config.hpp"
#include "mmsc/networks.hpp"

namespace mmsc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'M', 'S', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const fs::path& file) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw IoError(file.string() + ": truncated checkpoint");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

void put_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

void get_doubles(std::istream& in, std::span<double> values, const fs::path& file) {
  for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in, file));
}

}  // namespace

// Coefficient blocks are stored in Eigen's native column-major order.
void save_checkpoint(const fs::path& file, MultiBranchAutoencoder& model, const TrainState& state) {
  const auto blocks = parameter_blocks(model);
  if (state.optimizers.size() != blocks.size()) {
    throw DimensionError("save_checkpoint: optimizer state does not match the model's parameter blocks");
  }
  json header;
  header["model"] = to_json(model.config);
  header["samples"] = model.samples;
  header["epochs_done"] = state.epochs_done;
  header["loss_trace_length"] = state.loss_trace.size();
  header["warnings"] = state.warnings;
  header["coefficient_layout"] = "column-major";
  json jb = json::array(), jo = json::array();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    jb.push_back({{"name", blocks[i].name}, {"size", blocks[i].values.size()}});
    const auto& o = state.optimizers[i];
    jo.push_back({{"step", o.step},
                  {"learning_rate", o.learning_rate},
                  {"beta1", o.beta1},
                  {"beta2", o.beta2},
                  {"epsilon", o.epsilon}});
  }
  header["blocks"] = jb;
  header["optimizers"] = jo;
  const std::string text = header.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : blocks) put_doubles(out, b.values);
  for (const auto& o : state.optimizers) put_doubles(out, o.first_moment);
  for (const auto& o : state.optimizers) put_doubles(out, o.second_moment);
  put_doubles(out, state.loss_trace);
  if (!out) throw IoError("short write to " + file.string());
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError(file.string() + ": not a checkpoint");
  if (get_le<std::uint32_t>(in, file) != kVersion) throw IoError(file.string() + ": unsupported checkpoint version");
  const auto len = get_le<std::uint64_t>(in, file);
  if (len > (1u << 26)) throw IoError(file.string() + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(file.string() + ": truncated header");

  json header;
  Checkpoint ck;
  try {
    header = json::parse(text);
    const ModelConfig config = model_config_from_json(header.at("model"));
    ck.model = build_model_unchecked(config, header.at("samples").get<std::size_t>());
    ck.state = make_train_state(ck.model);
    ck.state.epochs_done = header.at("epochs_done").get<std::size_t>();
    ck.state.warnings = header.at("warnings").get<std::vector<std::string>>();
    ck.state.loss_trace.resize(header.at("loss_trace_length").get<std::size_t>());
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": bad checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(file.string() + ": bad checkpoint model: " + e.what());
  }

  auto blocks = parameter_blocks(ck.model);
  const json& jb = header.at("blocks");
  const json& jo = header.at("optimizers");
  if (jb.size() != blocks.size() || jo.size() != blocks.size()) {
    throw IoError(file.string() + ": block count does not match the model");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (jb[i].at("name").get<std::string>() != blocks[i].name ||
        jb[i].at("size").get<std::size_t>() != blocks[i].values.size()) {
      throw IoError(file.string() + ": block " + std::to_string(i) + " does not match the model layout");
    }
    auto& o = ck.state.optimizers[i];
    o.step = jo[i].at("step").get<std::uint64_t>();
    o.learning_rate = jo[i].at("learning_rate").get<double>();
    o.beta1 = jo[i].at("beta1").get<double>();
    o.beta2 = jo[i].at("beta2").get<double>();
    o.epsilon = jo[i].at("epsilon").get<double>();
  }
  for (auto& b : blocks) get_doubles(in, b.values, file);
  for (auto& o : ck.state.optimizers) get_doubles(in, o.first_moment, file);
  for (auto& o : ck.state.optimizers) get_doubles(in, o.second_moment, file);
  get_doubles(in, ck.state.loss_trace, file);
  in.peek();
  if (!in.eof()) throw IoError(file.string() + ": trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace mmsc
