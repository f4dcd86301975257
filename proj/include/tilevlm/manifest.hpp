#pragma once

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tilevlm/common.hpp"

namespace tvlm {

// Everything needed to reproduce a run and to check that a reproduction
// worked: the argument vector as given, the effective settings, and a
// digest of every file the command produced. Deliberately no timestamps or
// host details — the manifest itself must be byte-stable across replays.
struct RunManifest {
  std::string engine_version = kEngineVersion;
  std::vector<std::string> command;            // subcommand + flags, replayable
  bool has_seed = false;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;   // effective settings as text
  std::map<std::string, std::string> outputs;  // path -> fnv1a64 hex digest
};

inline std::string digest_hex(std::string_view bytes) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(bytes);
  return os.str();
}

inline std::string digest_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw EngineError("cannot open " + path + " for digest");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return digest_hex(bytes);
}

inline void save_manifest(const std::string& path, const RunManifest& m) {
  nlohmann::json j;  // alphabetical keys, so serialization is canonical
  j["engine_version"] = m.engine_version;
  j["command"] = m.command;
  if (m.has_seed) j["seed"] = m.seed;
  j["config"] = m.config;
  j["outputs"] = m.outputs;
  std::ofstream os(path);
  if (!os) throw EngineError("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw EngineError("failed writing " + path);
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw EngineError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw EngineError(path + ": bad manifest: " + e.what());
  }
  RunManifest m;
  try {
    m.engine_version = j.at("engine_version").get<std::string>();
    m.command = j.at("command").get<std::vector<std::string>>();
    if (j.contains("seed")) {
      m.has_seed = true;
      m.seed = j.at("seed").get<std::uint64_t>();
    }
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw EngineError(path + ": bad manifest: " + e.what());
  }
  return m;
}

}  // namespace tvlm
