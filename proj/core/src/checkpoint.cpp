#include "langroute/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "json.hpp"
#include "langroute/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is raw little-endian doubles");

namespace langroute {

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& cfg) {
  return json{{"n_layers", cfg.n_layers},       {"d_model", cfg.d_model},
              {"d_ff", cfg.d_ff},               {"n_heads", cfg.n_heads},
              {"vocab_size", cfg.vocab_size},   {"max_seq_len", cfg.max_seq_len},
              {"seed", cfg.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const CheckpointMeta& meta) {
  json header;
  header["format"] = "langroute-checkpoint";
  header["version"] = 1;
  header["config"] = config_to_json(model.config());
  json plist = json::array();
  std::uint64_t offset = 0;
  for (const Param& p : model.params()) {
    plist.push_back({{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}});
    offset += p.value.data.size() * sizeof(double);
  }
  header["params"] = std::move(plist);
  header["trained_pairs"] = meta.trained_pairs;
  header["manifest"] = meta.manifest_json;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f << header.dump() << '\n';
  for (const Param& p : model.params()) {
    f.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!f) throw DataError("short write to checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("checkpoint missing header: " + path);
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "langroute-checkpoint") {
    throw DataError("not a checkpoint file: " + path);
  }
  LoadedCheckpoint out;
  try {
    out.model = TransformerModel(config_from_json(header.at("config")));
    const std::streampos base = f.tellg();
    const auto& plist = header.at("params");
    if (plist.size() != out.model.params().size()) {
      throw DataError("checkpoint parameter list does not match the model");
    }
    for (const auto& entry : plist) {
      const std::string name = entry.at("name").get<std::string>();
      if (!out.model.has_param(name)) throw DataError("checkpoint has unknown parameter " + name);
      Param& p = out.model.param(name);
      if (entry.at("shape").get<std::vector<std::int64_t>>() != p.value.shape) {
        throw DataError("checkpoint shape mismatch for " + name);
      }
      f.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
      f.read(reinterpret_cast<char*>(p.value.data.data()),
             static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
      if (!f) throw DataError("checkpoint payload truncated at " + name);
    }
    out.meta.trained_pairs = header.value("trained_pairs", std::vector<std::string>{});
    out.meta.manifest_json = header.value("manifest", std::string{});
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
  return out;
}

}  // namespace langroute
