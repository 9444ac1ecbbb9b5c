#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace tpsep::net {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_channels = 32;   // N
  int enc_kernel = 8;
  int enc_stride = 4;
  int chunk_k = 32;      // K
  int repeats_p = 2;     // P, triple-path repeats per sub-network
  int hidden_h = 32;     // H, per recurrent direction
  int num_speakers = 2;  // C
  int stages = 3;
  int ca_reduction = 4;  // r
  // Feed all three paths from the repeat input instead of chaining them.
  // Not exposed in the JSON config.
  bool parallel_paths = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (n_channels <= 0 || enc_kernel <= 0 || enc_stride <= 0 || chunk_k <= 0 ||
        repeats_p <= 0 || hidden_h <= 0 || num_speakers <= 0 || ca_reduction <= 0) {
      fail("all sizes must be positive");
    }
    if (enc_kernel != 2 * enc_stride) fail("enc_stride must equal enc_kernel/2");
    if (chunk_k % 2 != 0) fail("chunk_k must be even");
    if (n_channels % ca_reduction != 0) fail("n_channels must be divisible by ca_reduction");
    if (stages < 1 || stages > 3) fail("stages must be 1, 2 or 3");
    if (num_speakers < 2) fail("num_speakers must be at least 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_channels"] = c.n_channels;
  j["enc_kernel"] = c.enc_kernel;
  j["enc_stride"] = c.enc_stride;
  j["chunk_k"] = c.chunk_k;
  j["repeats_p"] = c.repeats_p;
  j["hidden_h"] = c.hidden_h;
  j["num_speakers"] = c.num_speakers;
  j["stages"] = c.stages;
  j["ca_reduction"] = c.ca_reduction;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      static const char* known[] = {"n_channels", "enc_kernel", "enc_stride",
                                    "chunk_k",    "repeats_p",  "hidden_h",
                                    "num_speakers", "stages",   "ca_reduction"};
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok) throw ConfigError("model config: unknown key '" + it.key() + "'");
    }
    c.n_channels = j.at("n_channels").get<int>();
    c.enc_kernel = j.at("enc_kernel").get<int>();
    c.enc_stride = j.at("enc_stride").get<int>();
    c.chunk_k = j.at("chunk_k").get<int>();
    c.repeats_p = j.at("repeats_p").get<int>();
    c.hidden_h = j.at("hidden_h").get<int>();
    c.num_speakers = j.at("num_speakers").get<int>();
    c.stages = j.at("stages").get<int>();
    c.ca_reduction = j.at("ca_reduction").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("model config: cannot open " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace tpsep::net
