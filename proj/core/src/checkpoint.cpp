#include "xflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "xflow/errors.hpp"
#include "xflow/io.hpp"

namespace xflow {

using nlohmann::json;

namespace {

template <typename T>
T get_as(const json& j, const char* key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("model config: bad value for '") + key + "'");
  }
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

json config_to_json(const ClassifierConfig& c) {
  return json{{"arch", to_string(c.arch)},
              {"kind", to_string(c.kind)},
              {"max_len", c.max_len},
              {"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"ff_hidden", c.ff_hidden},
              {"dropout_rate", c.dropout_rate},
              {"num_classes", c.num_classes},
              {"pooling", "mean"},
              {"seed", c.seed},
              {"rtt_scale", c.rtt_scale}};
}

ClassifierConfig config_from_json(const json& j, ClassifierConfig base) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const char* k = key.c_str();
    if (key == "arch") {
      base.arch = arch_from_string(get_as<std::string>(value, k));
    } else if (key == "kind") {
      base.kind = unit_kind_from_string(get_as<std::string>(value, k));
    } else if (key == "max_len") {
      base.max_len = get_as<std::size_t>(value, k);
    } else if (key == "d_model") {
      base.d_model = get_as<std::size_t>(value, k);
    } else if (key == "n_layers") {
      base.n_layers = get_as<std::size_t>(value, k);
    } else if (key == "n_heads") {
      base.n_heads = get_as<std::size_t>(value, k);
    } else if (key == "ff_hidden") {
      base.ff_hidden = get_as<std::size_t>(value, k);
    } else if (key == "dropout_rate") {
      base.dropout_rate = get_as<double>(value, k);
    } else if (key == "num_classes") {
      base.num_classes = get_as<std::size_t>(value, k);
    } else if (key == "pooling") {
      if (get_as<std::string>(value, k) != "mean") throw ValidationError("model config: only mean pooling is supported");
    } else if (key == "seed") {
      base.seed = get_as<std::uint64_t>(value, k);
    } else if (key == "rtt_scale") {
      base.rtt_scale = get_as<double>(value, k);
    } else {
      throw ValidationError("model config: unknown key '" + key + "'");
    }
  }
  return base;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params, const ClassifierConfig& config) {
  check_params(params, config);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create checkpoint directory " + dir.string());

  json tensors = json::array();
  std::string blob;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensor(i);
    tensors.push_back({{"name", params.names()[i]}, {"shape", t.shape()}, {"offset", offset}, {"len", t.size()}});
    offset += t.size();
    for (float v : t.values()) {
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(v));
      char buf[4];
      std::memcpy(buf, &bits, 4);
      blob.append(buf, 4);
    }
  }
  const json manifest{{"version", kCheckpointVersion}, {"config", config_to_json(config)}, {"tensors", tensors}};
  write_file(dir / "params.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw ValidationError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.is_object() || !manifest.contains("version") || !manifest.contains("config") ||
      !manifest.contains("tensors")) {
    throw ValidationError("checkpoint manifest needs version, config and tensors");
  }
  if (!manifest["version"].is_number_integer() || manifest["version"].get<int>() != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + manifest["version"].dump());
  }
  Checkpoint ck;
  ck.config = config_from_json(manifest["config"]);
  ck.config.validate();

  const auto layout = param_layout(ck.config);
  const json& tensors = manifest["tensors"];
  if (!tensors.is_array() || tensors.size() != layout.size()) {
    throw ValidationError("checkpoint manifest lists " + std::to_string(tensors.is_array() ? tensors.size() : 0) +
                          " tensors, config expects " + std::to_string(layout.size()));
  }
  std::size_t expected_offset = 0;
  std::vector<grad::Shape> shapes;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const json& t = tensors[i];
    grad::Shape shape;
    std::string name;
    std::size_t off = 0, len = 0;
    try {
      name = t.at("name").get<std::string>();
      shape = t.at("shape").get<grad::Shape>();
      off = t.at("offset").get<std::size_t>();
      len = t.at("len").get<std::size_t>();
    } catch (const json::exception&) {
      throw ValidationError("checkpoint tensor entry " + std::to_string(i) + " is malformed");
    }
    if (name != layout[i].first || shape != layout[i].second) {
      throw ValidationError("checkpoint tensor " + name + grad::shape_str(shape) + " does not match expected " +
                            layout[i].first + grad::shape_str(layout[i].second));
    }
    if (len != grad::shape_numel(shape) || off != expected_offset) {
      throw ValidationError("checkpoint tensor " + name + " has inconsistent offset/len");
    }
    expected_offset += len;
    shapes.push_back(shape);
  }

  const std::string blob = read_file(dir / "params.bin");
  if (blob.size() != expected_offset * 4) {
    throw ValidationError("checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest expects " +
                          std::to_string(expected_offset * 4));
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    grad::NumArray<float> t(shapes[i]);
    for (auto& v : t.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + pos, 4);
      pos += 4;
      v = std::bit_cast<float>(to_le(bits));
    }
    if (!t.all_finite()) throw ValidationError("checkpoint tensor " + layout[i].first + " has non-finite values");
    ck.params.add(layout[i].first, std::move(t));
  }
  return ck;
}

}  // namespace xflow
