#pragma once

#include <map>
#include <string>
#include <vector>

namespace seqctl {

const char* toolkit_version();

std::string utc_timestamp();

// Reproducibility record written beside every artifact-producing run. The
// command plus the config snapshot and seed are sufficient to re-run; input
// and checkpoint hashes pin what the run consumed.
struct RunManifest {
  struct HashedPath {
    std::string path;
    std::string hash;  // hex64 fingerprint of the file bytes
  };

  std::string command;
  std::string config_json = "{}";  // effective options after precedence
  std::map<std::string, HashedPath> inputs;
  std::map<std::string, HashedPath> checkpoints;
  uint64_t seed = 0;
  std::string started_utc;
  std::string finished_utc;
  std::vector<std::string> artifacts;
  std::string version;

  static RunManifest begin(const std::string& command, const std::string& config_json,
                           uint64_t seed);
  void add_input(const std::string& label, const std::string& path);
  void add_checkpoint(const std::string& label, const std::string& path);
  void add_artifact(const std::string& path);
  // Stamps the end timestamp and writes the manifest itself.
  void finish(const std::string& path);

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  static RunManifest load(const std::string& path);
};

}  // namespace seqctl
