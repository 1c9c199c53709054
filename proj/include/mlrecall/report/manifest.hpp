#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/chrono.h>
#include <json.hpp>

#include "mlrecall/core/container.hpp"
#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/hash.hpp"
#include "mlrecall/steering/vector.hpp"

namespace mlrecall {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object(); // effective flags, file and command line merged
  std::string model_fingerprint;
  std::string dataset_hash;
  nlohmann::json split = nullptr;
  std::uint64_t seed = 0;
  std::vector<std::string> interventions;
  std::string tool_version = kToolVersion;
  std::string started;
  std::string finished;
  std::map<std::string, std::string> artifacts; // relative path -> sha256

  std::string config_hash() const { return sha256_hex(config.dump()).substr(0, 16); }

  // Content id over everything that determines the outputs. Timestamps and
  // the artifact list are excluded, so reruns get the same id.
  std::string id() const {
    const nlohmann::json core{{"command", command},         {"config_hash", config_hash()},
                              {"model", model_fingerprint}, {"dataset", dataset_hash},
                              {"split", split},             {"seed", seed},
                              {"interventions", interventions}, {"tool_version", tool_version}};
    return sha256_hex(core.dump()).substr(0, 16);
  }

  nlohmann::json to_json() const {
    return {{"manifest", id()},
            {"command", command},
            {"config", config},
            {"config_hash", config_hash()},
            {"model_fingerprint", model_fingerprint},
            {"dataset_hash", dataset_hash},
            {"split", split},
            {"seed", seed},
            {"interventions", interventions},
            {"tool_version", tool_version},
            {"started", started},
            {"finished", finished},
            {"artifacts", artifacts}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
    m.split = j.at("split");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.interventions = j.at("interventions").get<std::vector<std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    return m;
  }
};

inline std::string utc_now() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now())));
}

inline std::string file_sha256(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read '" + p.string() + "'");
  Sha256 h;
  char buf[1 << 16];
  while (f.read(buf, sizeof buf) || f.gcount() > 0) h.update(std::string_view(buf, static_cast<std::size_t>(f.gcount())));
  return h.hex();
}

inline const std::string& csv_manifest_prefix() {
  static const std::string p = "# manifest=";
  return p;
}

// Stages every artifact in a scratch directory next to the output directory
// and moves them into place only on commit(). Destroying an uncommitted writer
// deletes the scratch directory, so a failed run leaves nothing behind.
class ArtifactWriter {
public:
  ArtifactWriter(std::filesystem::path out_dir, RunManifest manifest)
      : out_(std::move(out_dir)), manifest_(std::move(manifest)), id_(manifest_.id()) {
    std::random_device rd;
    const auto parent = out_.has_parent_path() ? out_.parent_path() : std::filesystem::path(".");
    std::filesystem::create_directories(parent);
    stage_ = parent / fmt::format(".{}.staging-{:08x}", out_.filename().string(), rd());
    std::filesystem::create_directories(stage_);
  }
  ArtifactWriter(const ArtifactWriter&) = delete;
  ArtifactWriter& operator=(const ArtifactWriter&) = delete;
  ~ArtifactWriter() {
    std::error_code ec;
    std::filesystem::remove_all(stage_, ec);
  }

  const std::string& manifest_id() const { return id_; }
  RunManifest& manifest() { return manifest_; }

  void csv(const std::string& name, const CsvTable& t) { text(name, csv_manifest_prefix() + id_ + "\n" + t.str()); }

  void json(const std::string& name, nlohmann::json j) {
    if (!j.is_object()) j = nlohmann::json{{"data", std::move(j)}};
    j["manifest"] = id_;
    text(name, j.dump(2) + "\n");
  }

  // Steering vector container plus its JSON sidecar, both tagged.
  void vector(const std::string& name, const SteeringVector& v) {
    auto c = vector_container(v);
    c.metadata["manifest"] = id_;
    const auto p = prepare(name);
    c.save(p);
    names_.push_back(name);
    auto side = sidecar_json(v);
    json(sidecar_path(name).string(), side);
  }

  // Moves staged files into the output directory and writes manifest.json.
  void commit() {
    manifest_.finished = utc_now();
    for (const auto& n : names_) manifest_.artifacts[n] = file_sha256(stage_ / n);
    {
      std::ofstream f(stage_ / "manifest.json", std::ios::trunc);
      f << manifest_.to_json().dump(2) << '\n';
    }
    names_.push_back("manifest.json");
    std::filesystem::create_directories(out_);
    for (const auto& n : names_) {
      const auto dst = out_ / n;
      std::filesystem::create_directories(dst.parent_path());
      std::filesystem::rename(stage_ / n, dst);
    }
    names_.clear();
  }

private:
  std::filesystem::path out_, stage_;
  RunManifest manifest_;
  std::string id_;
  std::vector<std::string> names_;

  std::filesystem::path prepare(const std::string& name) {
    const auto p = stage_ / name;
    std::filesystem::create_directories(p.parent_path());
    return p;
  }

  void text(const std::string& name, const std::string& content) {
    std::ofstream f(prepare(name), std::ios::binary | std::ios::trunc);
    f << content;
    if (!f) throw Error("cannot write artifact '" + name + "'");
    names_.push_back(name);
  }
};

struct VerifyResult {
  bool ok = true;
  std::string manifest_id;
  std::vector<std::string> problems;
};

// The manifest tag embedded in an artifact, by file type.
inline std::optional<std::string> embedded_manifest(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".csv") {
    std::ifstream f(p);
    std::string first;
    std::getline(f, first);
    if (first.rfind(csv_manifest_prefix(), 0) != 0) return std::nullopt;
    return first.substr(csv_manifest_prefix().size());
  }
  if (ext == ".json") {
    std::ifstream f(p);
    const auto j = nlohmann::json::parse(f, nullptr, false);
    if (!j.is_object() || !j.contains("manifest") || !j["manifest"].is_string()) return std::nullopt;
    return j["manifest"].get<std::string>();
  }
  try {
    const auto c = TensorContainer::load(p);
    if (!c.metadata.contains("manifest")) return std::nullopt;
    return c.metadata["manifest"].get<std::string>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// Re-derives the manifest id and every artifact hash of a run directory.
inline VerifyResult verify_run(const std::filesystem::path& dir) {
  VerifyResult r;
  auto fail = [&r](std::string msg) {
    r.ok = false;
    r.problems.push_back(std::move(msg));
  };
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) {
    fail("no manifest.json in '" + dir.string() + "'");
    return r;
  }
  RunManifest m;
  nlohmann::json raw;
  try {
    std::ifstream f(mpath);
    raw = nlohmann::json::parse(f);
    m = RunManifest::from_json(raw);
  } catch (const std::exception& e) {
    fail(std::string("manifest.json is malformed: ") + e.what());
    return r;
  }
  r.manifest_id = m.id();
  if (raw.value("manifest", "") != r.manifest_id) fail("manifest id does not match its recorded content");
  if (raw.value("config_hash", "") != m.config_hash()) fail("config hash does not match the recorded config");
  for (const auto& [name, sha] : m.artifacts) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) {
      fail(name + ": missing");
      continue;
    }
    if (file_sha256(p) != sha) fail(name + ": content hash changed");
    const auto tag = embedded_manifest(p);
    if (!tag) fail(name + ": no embedded manifest tag");
    else if (*tag != r.manifest_id) fail(name + ": tagged with manifest " + *tag);
  }
  return r;
}

} // namespace mlrecall
