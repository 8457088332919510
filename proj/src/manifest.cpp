#include "unifier/manifest.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "unifier/util.hpp"

namespace unifier {

std::string path_hash(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return directory_hash(path);
  return file_hash(path);
}

void RunManifest::add_input(const std::filesystem::path& path) { inputs[path.string()] = path_hash(path); }

void RunManifest::add_artifact(const std::filesystem::path& path) {
  artifacts[path.string()] = path_hash(path);
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command}, {"tool_version", tool_version}, {"config", config},
          {"seeds", seeds},     {"inputs", inputs},             {"artifacts", artifacts}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.tool_version = j.value("tool_version", std::string());
  m.config = j.value("config", nlohmann::json::object());
  m.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
  m.inputs = j.value("inputs", std::map<std::string, std::string>{});
  m.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  return m;
}

void append_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "manifest.jsonl", std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + (dir / "manifest.jsonl").string());
  out << m.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + (dir / "manifest.jsonl").string());
}

std::vector<RunManifest> read_manifests(const std::filesystem::path& dir) {
  std::vector<RunManifest> out;
  const auto path = dir / "manifest.jsonl";
  if (!std::filesystem::exists(path)) return out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(RunManifest::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace unifier
