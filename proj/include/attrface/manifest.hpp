#pragma once

// Run manifests written next to every command's outputs.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <map>
#include <string>
#include <vector>

#include "attrface/binary_io.hpp"
#include "attrface/rng.hpp"
#include "json.hpp"

namespace attrface {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string run_id;
  std::string command;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, std::string> input_paths;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> outputs;
  std::string started_at;
  std::string finished_at;
};

/// UTC wall-clock time as YYYY-MM-DDTHH:MM:SSZ.
inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Hex digest of the command name and every input that determines its
/// outputs. Identical inputs give identical identifiers.
class RunIdBuilder {
 public:
  explicit RunIdBuilder(std::string_view command) { add("command", command); }

  RunIdBuilder& add(std::string_view key, std::string_view value) {
    mix(key);
    mix(value);
    return *this;
  }
  RunIdBuilder& add(std::string_view key, std::uint64_t value) { return add(key, std::to_string(value)); }
  RunIdBuilder& add_bytes(std::string_view key, const std::vector<unsigned char>& bytes) {
    return add(key, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }

  std::string str() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  void mix(std::string_view s) {
    state_ = splitmix64(state_ ^ fnv1a64(s) ^ (s.size() * 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t state_ = 0x243f6a8885a308d3ULL;
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"run_id", m.run_id},
          {"command", m.command},
          {"tool_version", kToolVersion},
          {"config_paths", m.config_paths},
          {"input_paths", m.input_paths},
          {"seeds", m.seeds},
          {"outputs", m.outputs},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at}};
}

inline void write_manifest(const RunManifest& m, const std::string& path) {
  io::write_text(path, to_json(m).dump(2) + "\n");
}

}  // namespace attrface
