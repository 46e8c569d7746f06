#pragma once

#include <fstream>
#include <string>

#include "json.hpp"
#include "veloio/io.hpp"
#include "veloio/moe.hpp"

// Versioned checkpoint container: config block, named parameter arrays
// (name -> shape -> row-major 64-bit values, registration order) and an
// FNV-1a content checksum over the raw value bits.

namespace veloio::moe {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json config_to_json(const MoeConfig& c) {
  return nlohmann::json{{"N", c.num_experts},
                        {"K", c.top_k},
                        {"c", c.capacity_factor},
                        {"L", c.window_len},
                        {"N_patch", c.num_patches},
                        {"L_feature", c.patch_len},
                        {"L_inner_feature", c.inner_dim},
                        {"L_out_dim", c.out_dim},
                        {"depth", c.depth},
                        {"lambda", c.aux_weight}};
}

inline MoeConfig config_from_json(const nlohmann::json& j) {
  MoeConfig c;
  c.num_experts = j.at("N").get<int>();
  c.top_k = j.at("K").get<int>();
  c.capacity_factor = j.at("c").get<double>();
  c.window_len = j.at("L").get<int>();
  c.num_patches = j.at("N_patch").get<int>();
  c.patch_len = j.at("L_feature").get<int>();
  c.inner_dim = j.at("L_inner_feature").get<int>();
  c.out_dim = j.at("L_out_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.aux_weight = j.at("lambda").get<double>();
  c.validate();
  return c;
}

inline std::string params_checksum(const ad::ParamSet& params) {
  Fnv1a64 h;
  for (const auto& p : params)
    for (double v : p.value) h.update_double(v);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h.digest()));
  return buf;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, MoeModel& model) {
  nlohmann::json j;
  j["format"] = "veloio-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = detail::config_to_json(model.config());
  j["checksum"] = detail::params_checksum(model.params());
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : model.params())
    arr.push_back(nlohmann::json{{"name", p.name}, {"shape", p.shape}, {"data", p.value}});
  j["params"] = std::move(arr);
  io::write_file_atomic(path, j.dump());
}

inline MoeModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint parse error: " + std::string(e.what()));
  }
  try {
    if (j.at("format").get<std::string>() != "veloio-checkpoint")
      throw DataError("not a veloio checkpoint: " + path.string());
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw DataError("unsupported checkpoint version in " + path.string());
    MoeModel model(detail::config_from_json(j.at("config")), 0);
    std::size_t loaded = 0;
    for (const auto& entry : j.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      if (!model.params().contains(name))
        throw DataError("checkpoint parameter not in model: " + name);
      ad::Parameter& p = model.params().at(name);
      const auto shape = entry.at("shape").get<std::vector<int>>();
      if (shape != p.shape)
        throw DataError("checkpoint shape mismatch for " + name + ": " +
                        shape_str(shape) + " vs " + shape_str(p.shape));
      const auto data = entry.at("data").get<std::vector<double>>();
      if (data.size() != p.value.size())
        throw DataError("checkpoint data length mismatch for " + name);
      p.value = data;
      ++loaded;
    }
    if (loaded != model.params().count())
      throw DataError("checkpoint is missing parameters (" + std::to_string(loaded) +
                      " of " + std::to_string(model.params().count()) + ")");
    if (j.at("checksum").get<std::string>() != detail::params_checksum(model.params()))
      throw DataError("checkpoint checksum mismatch: " + path.string());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint structure error: " + std::string(e.what()));
  }
}

}  // namespace veloio::moe
