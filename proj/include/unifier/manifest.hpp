#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace unifier {

inline constexpr const char* kToolVersion = "0.3.0";

/// One command invocation's record: what went in, what came out.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::uint64_t> seeds;
  /// path -> content hash
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> artifacts;
  std::string tool_version = kToolVersion;

  /// Hashes `path` (file or directory) and records it.
  void add_input(const std::filesystem::path& path);
  void add_artifact(const std::filesystem::path& path);

  [[nodiscard]] nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Hash of a file, or of a directory's sorted contents.
std::string path_hash(const std::filesystem::path& path);

/// Appends one JSON line to <dir>/manifest.jsonl.
void append_manifest(const std::filesystem::path& dir, const RunManifest& m);
std::vector<RunManifest> read_manifests(const std::filesystem::path& dir);

}  // namespace unifier
