#pragma once

// Dataset directory layout:
//   <dir>/mix/<id>.wav, <dir>/z/<id>.wav, <dir>/m/<id>_<k>.wav,
//   <dir>/s/<id>_<k>.wav, <dir>/manifest.jsonl

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpsep/audio/synth.hpp"
#include "tpsep/audio/wav.hpp"

namespace tpsep::audio {

struct ManifestRecord {
  std::string id;
  std::string mix_path;
  std::string denoised_path;
  std::vector<std::string> reverb_src_paths;
  std::vector<std::string> anechoic_src_paths;
  std::uint32_t sample_rate = 0;
  double snr_db = 0.0;
  std::vector<double> t60_list;
  std::uint64_t seed = 0;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline nlohmann::ordered_json to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["mix_path"] = r.mix_path;
  j["denoised_path"] = r.denoised_path;
  j["reverb_src_paths"] = r.reverb_src_paths;
  j["anechoic_src_paths"] = r.anechoic_src_paths;
  j["sample_rate"] = r.sample_rate;
  j["snr_db"] = r.snr_db;
  j["t60_list"] = r.t60_list;
  j["seed"] = r.seed;
  return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.mix_path = j.at("mix_path").get<std::string>();
    r.denoised_path = j.at("denoised_path").get<std::string>();
    r.reverb_src_paths = j.at("reverb_src_paths").get<std::vector<std::string>>();
    r.anechoic_src_paths = j.at("anechoic_src_paths").get<std::vector<std::string>>();
    r.sample_rate = j.at("sample_rate").get<std::uint32_t>();
    r.snr_db = j.at("snr_db").get<double>();
    r.t60_list = j.at("t60_list").get<std::vector<double>>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw AudioError(std::string("manifest: bad record: ") + e.what());
  }
  return r;
}

inline std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", index);
  return buf;
}

/// Writes the scene's WAV files under `dir` and returns its manifest record.
inline ManifestRecord write_scene(const MixtureScene& sc, const std::filesystem::path& dir,
                                  const std::string& id) {
  namespace fs = std::filesystem;
  for (const char* sub : {"mix", "z", "m", "s"}) fs::create_directories(dir / sub);
  ManifestRecord r;
  r.id = id;
  r.mix_path = "mix/" + id + ".wav";
  r.denoised_path = "z/" + id + ".wav";
  write_wav(sc.y, dir / r.mix_path);
  write_wav(sc.z, dir / r.denoised_path);
  for (std::size_t k = 0; k < sc.m.size(); ++k) {
    r.reverb_src_paths.push_back("m/" + id + "_" + std::to_string(k) + ".wav");
    r.anechoic_src_paths.push_back("s/" + id + "_" + std::to_string(k) + ".wav");
    write_wav(sc.m[k], dir / r.reverb_src_paths.back());
    write_wav(sc.s[k], dir / r.anechoic_src_paths.back());
  }
  r.sample_rate = sc.spec.sample_rate;
  r.snr_db = sc.spec.snr_db;
  r.t60_list = sc.t60;
  r.seed = sc.spec.seed;
  return r;
}

inline void write_manifest(const std::vector<ManifestRecord>& records,
                           const std::filesystem::path& dir) {
  std::ofstream f(dir / "manifest.jsonl", std::ios::binary);
  if (!f) throw AudioError("write_manifest: cannot open " + (dir / "manifest.jsonl").string());
  for (const auto& r : records) f << to_json(r).dump() << '\n';
}

/// Persists scenes as scene_00000, scene_00001, ... plus the manifest.
inline std::vector<ManifestRecord> save_dataset(const std::vector<MixtureScene>& scenes,
                                                const std::filesystem::path& dir) {
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    records.push_back(write_scene(scenes[i], dir, scene_id(i)));
  }
  write_manifest(records, dir);
  return records;
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.jsonl";
  std::ifstream f(path);
  if (!f) throw AudioError("manifest: cannot open " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw AudioError("manifest: line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(record_from_json(j));
  }
  return out;
}

/// Loads every signal of a record. The noise is recovered as y - z.
inline MixtureScene load_scene(const std::filesystem::path& dir, const ManifestRecord& r) {
  auto load = [&](const std::string& rel, const std::string& field) {
    const auto p = dir / rel;
    if (!std::filesystem::exists(p)) {
      throw AudioError("manifest: item " + r.id + " field " + field + ": missing file " + p.string());
    }
    return read_wav(p);
  };
  MixtureScene sc;
  sc.y = load(r.mix_path, "mix_path");
  sc.z = load(r.denoised_path, "denoised_path");
  for (const auto& p : r.reverb_src_paths) sc.m.push_back(load(p, "reverb_src_paths"));
  for (const auto& p : r.anechoic_src_paths) sc.s.push_back(load(p, "anechoic_src_paths"));
  if (sc.m.size() != sc.s.size()) {
    throw AudioError("manifest: item " + r.id + " has " + std::to_string(sc.m.size()) +
                     " reverberant but " + std::to_string(sc.s.size()) + " anechoic sources");
  }
  sc.noise = sc.y;
  for (std::size_t t = 0; t < sc.noise.size() && t < sc.z.size(); ++t) {
    sc.noise.samples[t] -= sc.z.samples[t];
  }
  sc.t60 = r.t60_list;
  sc.spec.num_speakers = static_cast<int>(sc.s.size());
  sc.spec.sample_rate = r.sample_rate;
  sc.spec.snr_db = r.snr_db;
  sc.spec.seed = r.seed;
  sc.spec.reverb_enabled = !r.t60_list.empty();
  sc.spec.duration = static_cast<double>(sc.y.size()) / r.sample_rate;
  return sc;
}

}  // namespace tpsep::audio
