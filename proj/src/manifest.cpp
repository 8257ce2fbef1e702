#include "manifest.hpp"

#include <chrono>
#include <ctime>

#include "checkpoint.hpp"
#include "json.hpp"
#include "util.hpp"

namespace seqctl {

const char* toolkit_version() { return "0.1.0"; }

std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest RunManifest::begin(const std::string& command,
                               const std::string& config_json, uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.config_json = config_json.empty() ? "{}" : config_json;
  try {
    nlohmann::json::parse(m.config_json);
  } catch (const std::exception& e) {
    fail(Error::Kind::InvalidArgument,
         std::string("manifest: config snapshot is not valid json: ") + e.what());
  }
  m.seed = seed;
  m.started_utc = utc_timestamp();
  m.version = toolkit_version();
  return m;
}

void RunManifest::add_input(const std::string& label, const std::string& path) {
  inputs[label] = {path, hex64(file_fingerprint(path))};
}

void RunManifest::add_checkpoint(const std::string& label, const std::string& path) {
  checkpoints[label] = {path, hex64(file_fingerprint(path))};
}

void RunManifest::add_artifact(const std::string& path) { artifacts.push_back(path); }

void RunManifest::finish(const std::string& path) {
  finished_utc = utc_timestamp();
  write_file(path, to_json() + "\n");
}

namespace {

nlohmann::json hashed_map_json(const std::map<std::string, RunManifest::HashedPath>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [label, hp] : m) j[label] = {{"path", hp.path}, {"hash", hp.hash}};
  return j;
}

std::map<std::string, RunManifest::HashedPath> hashed_map_from_json(
    const nlohmann::json& j) {
  std::map<std::string, RunManifest::HashedPath> m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    m[it.key()] = {it.value().at("path").get<std::string>(),
                   it.value().at("hash").get<std::string>()};
  }
  return m;
}

}  // namespace

std::string RunManifest::to_json() const {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = nlohmann::json::parse(config_json);
  j["inputs"] = hashed_map_json(inputs);
  j["checkpoints"] = hashed_map_json(checkpoints);
  j["seed"] = seed;
  j["started_utc"] = started_utc;
  j["finished_utc"] = finished_utc;
  j["artifacts"] = artifacts;
  j["version"] = version;
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(Error::Kind::Format, std::string("manifest: bad json: ") + e.what());
  }
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config_json = j.at("config").dump();
    m.inputs = hashed_map_from_json(j.at("inputs"));
    m.checkpoints = hashed_map_from_json(j.at("checkpoints"));
    m.seed = j.at("seed").get<uint64_t>();
    m.started_utc = j.at("started_utc").get<std::string>();
    m.finished_utc = j.at("finished_utc").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    m.version = j.at("version").get<std::string>();
  } catch (const std::exception& e) {
    fail(Error::Kind::Format, std::string("manifest: missing field: ") + e.what());
  }
  return m;
}

RunManifest RunManifest::load(const std::string& path) {
  return from_json(read_file(path));
}

}  // namespace seqctl
