#include <ctime>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "deskalign/hash.hpp"
#include "deskalign/pipeline.hpp"

namespace deskalign::pipeline {

using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), dir);
    if (rel == "meta.json") continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string content_hash(const fs::path& dir) {
  std::uint64_t h = fnv1a64("");
  for (const auto& rel : files_under(dir)) {
    h = fnv1a64(rel.generic_string(), h);
    h = fnv1a64(std::string_view("\0", 1), h);
    h = fnv1a64(read_file(dir / rel), h);
  }
  return hex64(h).substr(0, 12);
}

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

std::optional<fs::path> ArtifactStore::find(const std::string& stage) const {
  if (auto it = overrides_.find(stage); it != overrides_.end()) return it->second;
  const auto index = root_ / "index.json";
  if (!fs::exists(index)) return std::nullopt;
  const json j = json::parse(read_file(index));
  if (!j.contains(stage)) return std::nullopt;
  auto dir = root_ / j.at(stage).get<std::string>();
  if (!fs::is_directory(dir)) return std::nullopt;
  return dir;
}

fs::path ArtifactStore::input(const std::string& stage) const {
  if (auto dir = find(stage)) return *dir;
  throw std::runtime_error("missing input artifact '" + stage + "' in " + root_.string() + " (run the " + stage +
                           " stage first or pass --input " + stage + "=DIR)");
}

void ArtifactStore::set_override(const std::string& stage, fs::path dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("--input " + stage + ": not a directory: " + dir.string());
  overrides_[stage] = std::move(dir);
}

fs::path ArtifactStore::begin(const std::string& stage) {
  auto dir = root_ / (".tmp-" + stage + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunArtifacts ArtifactStore::commit(const std::string& stage, std::uint64_t seed, const json& config,
                                   const std::map<std::string, std::string>& inputs, double duration_s) {
  const auto scratch = root_ / (".tmp-" + stage + "-" + std::to_string(::getpid()));
  RunArtifacts art;
  art.stage = stage;
  art.seed = seed;
  art.inputs = inputs;
  art.duration_s = duration_s;
  art.name = stage + "-" + std::to_string(seed) + "-" + content_hash(scratch);
  art.dir = root_ / art.name;
  fs::remove_all(art.dir);
  fs::rename(scratch, art.dir);
  for (const auto& rel : files_under(art.dir)) art.outputs.push_back(art.dir / rel);

  json outputs = json::array();
  for (const auto& p : art.outputs) outputs.push_back(fs::relative(p, art.dir).generic_string());
  write_json(art.dir / "meta.json", json{{"stage", stage},
                                         {"name", art.name},
                                         {"seed", seed},
                                         {"inputs", inputs},
                                         {"outputs", outputs},
                                         {"config", config},
                                         {"duration_s", duration_s},
                                         {"timestamp", utc_now()}});

  const auto index_path = root_ / "index.json";
  json index = fs::exists(index_path) ? json::parse(read_file(index_path)) : json::object();
  index[stage] = art.name;
  const auto tmp = root_ / ".index.json.tmp";
  write_json(tmp, index);
  fs::rename(tmp, index_path);
  return art;
}

}  // namespace deskalign::pipeline
