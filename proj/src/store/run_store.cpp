// SPDX-License-Identifier: Apache-2.0
#include "shortlens/store/run_store.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <random>

#include "shortlens/error.hpp"

namespace shortlens::store {

namespace fs = std::filesystem;

namespace {

const std::vector<Stage> kCoreStages = {
    Stage::kData,      Stage::kTrained,  Stage::kExported,
    Stage::kClustered, Stage::kPrototyped, Stage::kSelected,
    Stage::kMitigated, Stage::kEvaluated,
};

std::mt19937_64& thread_rng() {
  static thread_local std::mt19937_64 rng(std::random_device{}());
  return rng;
}

}  // namespace

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::kData:
      return "data";
    case Stage::kTrained:
      return "trained";
    case Stage::kExported:
      return "exported";
    case Stage::kClustered:
      return "clustered";
    case Stage::kPrototyped:
      return "prototyped";
    case Stage::kConcepts:
      return "concepts";
    case Stage::kSelected:
      return "selected";
    case Stage::kMitigated:
      return "mitigated";
    case Stage::kEvaluated:
      return "evaluated";
  }
  return "?";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {
      Stage::kData,       Stage::kTrained,  Stage::kExported,
      Stage::kClustered,  Stage::kPrototyped, Stage::kConcepts,
      Stage::kSelected,   Stage::kMitigated, Stage::kEvaluated,
  };
  return stages;
}

Stage stage_from_string(const std::string& name) {
  for (Stage s : all_stages()) {
    if (name == to_string(s)) return s;
  }
  throw InvalidInput("unknown stage '" + name + "'");
}

std::vector<Stage> prerequisites(Stage stage) {
  if (stage == Stage::kConcepts) {
    return {Stage::kData, Stage::kTrained, Stage::kExported, Stage::kClustered,
            Stage::kPrototyped};
  }
  std::vector<Stage> out;
  for (Stage s : kCoreStages) {
    if (s == stage) break;
    out.push_back(s);
  }
  return out;
}

bool RunRecord::done(Stage s) const {
  const auto it = stages.find(s);
  return it != stages.end() && it->second;
}

bool RunRecord::flags_monotone() const {
  for (Stage s : all_stages()) {
    if (!done(s)) continue;
    for (Stage p : prerequisites(s)) {
      if (!done(p)) return false;
    }
  }
  return true;
}

json RunRecord::to_json() const {
  json flags = json::object();
  json seconds = json::object();
  for (Stage s : all_stages()) {
    flags[to_string(s)] = done(s);
    if (const auto it = stage_seconds.find(s); it != stage_seconds.end()) {
      seconds[to_string(s)] = it->second;
    }
  }
  return {{"run_id", run_id},         {"config", config},
          {"stages", flags},          {"artifacts", artifacts},
          {"stage_seconds", seconds}, {"created_at", created_at},
          {"updated_at", updated_at}};
}

RunRecord RunRecord::from_json(const json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config = j.value("config", json::object());
  const json stages = j.value("stages", json::object());
  for (const auto& [k, v] : stages.items()) {
    r.stages[stage_from_string(k)] = v.get<bool>();
  }
  r.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  const json secs = j.value("stage_seconds", json::object());
  for (const auto& [k, v] : secs.items()) {
    r.stage_seconds[stage_from_string(k)] = v.get<double>();
  }
  r.created_at = j.value("created_at", "");
  r.updated_at = j.value("updated_at", "");
  return r;
}

std::string make_ulid() {
  static constexpr char kAlphabet[] = "0123456789ABCDEFGHJKMNPQRSTVWXYZ";
  const auto ms = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  std::string out(26, '0');
  std::uint64_t t = ms;
  for (int i = 9; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kAlphabet[t & 31u];
    t >>= 5;
  }
  // 80 random bits: 16 base32 characters.
  std::uint64_t hi = thread_rng()();
  std::uint64_t lo = thread_rng()();
  for (int i = 0; i < 16; ++i) {
    std::uint64_t& src = i < 8 ? hi : lo;
    out[static_cast<std::size_t>(10 + i)] = kAlphabet[src & 31u];
    src >>= 5;
  }
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunStore::RunStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_);
}

fs::path RunStore::run_dir(const std::string& run_id) const {
  if (run_id.empty() || run_id.find('/') != std::string::npos ||
      run_id.find("..") != std::string::npos) {
    throw InvalidInput("invalid run id '" + run_id + "'");
  }
  return root_ / run_id;
}

fs::path RunStore::artifact_dir(const std::string& run_id,
                                const std::string& kind) const {
  return run_dir(run_id) / kind;
}

RunRecord RunStore::create_run(const json& config,
                               std::optional<std::string> run_id) {
  RunRecord r;
  r.run_id = run_id.value_or(make_ulid());
  r.config = config;
  r.created_at = utc_timestamp();
  fs::create_directories(run_dir(r.run_id));
  save_run(r);
  return r;
}

bool RunStore::exists(const std::string& run_id) const {
  try {
    return fs::exists(run_dir(run_id) / "run.json");
  } catch (const InvalidInput&) {
    return false;
  }
}

RunRecord RunStore::load_run(const std::string& run_id) const {
  const fs::path p = run_dir(run_id) / "run.json";
  if (!fs::exists(p)) throw NotFound("run '" + run_id + "' not found");
  return RunRecord::from_json(json::parse(read_text(p)));
}

void RunStore::save_run(RunRecord& record) const {
  record.updated_at = utc_timestamp();
  atomic_write(run_dir(record.run_id) / "run.json", record.to_json().dump(2));
}

std::vector<std::string> RunStore::list_runs() const {
  std::vector<std::string> out;
  if (!fs::exists(root_)) return out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (entry.is_directory() && fs::exists(entry.path() / "run.json")) {
      out.push_back(entry.path().filename().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path RunStore::write_artifact(const std::string& run_id,
                                  const std::string& kind,
                                  const Artifact& payload) const {
  const fs::path dir = artifact_dir(run_id, kind);
  write_artifact_dir(dir, payload);
  return dir;
}

Artifact RunStore::read_artifact(const std::string& run_id,
                                 const std::string& kind) const {
  const fs::path dir = artifact_dir(run_id, kind);
  if (!fs::exists(dir / "manifest.json")) {
    throw NotFound("artifact '" + kind + "' of run '" + run_id +
                   "' not found");
  }
  return read_artifact_dir(dir);
}

bool RunStore::has_artifact(const std::string& run_id,
                            const std::string& kind) const {
  return fs::exists(artifact_dir(run_id, kind) / "manifest.json");
}

void write_artifact_dir(const fs::path& dir, const Artifact& payload) {
  const fs::path parent = dir.parent_path();
  fs::create_directories(parent);
  const std::string suffix = std::to_string(thread_rng()());
  const fs::path tmp = parent / ("." + dir.filename().string() + ".tmp-" + suffix);
  fs::create_directories(tmp);

  json arrays = json::object();
  for (const auto& [name, tensor] : payload.arrays) {
    const std::string file = name + ".slns";
    write_tensor(tmp / file, tensor);
    arrays[name] = {{"file", file},
                    {"dtype", dtype_name(tensor.dtype)},
                    {"shape", tensor.shape}};
  }
  const json manifest = {{"meta", payload.meta}, {"arrays", arrays}};
  atomic_write(tmp / "manifest.json", manifest.dump(2));

  if (fs::exists(dir)) {
    const fs::path old = parent / ("." + dir.filename().string() + ".old-" + suffix);
    fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
  } else {
    fs::rename(tmp, dir);
  }
}

Artifact read_artifact_dir(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw NotFound("no manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_text(mpath));
  } catch (const json::parse_error& e) {
    throw IntegrityError("manifest " + mpath.string() + " is not valid JSON",
                         e.byte);
  }
  Artifact out;
  out.meta = manifest.value("meta", json::object());
  const json arrays = manifest.value("arrays", json::object());
  for (const auto& [name, entry] : arrays.items()) {
    const fs::path file = dir / entry.at("file").get<std::string>();
    if (!fs::exists(file)) throw NotFound("array file " + file.string() + " missing");
    Tensor t = read_tensor(file);
    if (dtype_name(t.dtype) != entry.at("dtype").get<std::string>()) {
      throw IntegrityError("array '" + name + "' dtype disagrees with manifest", 8);
    }
    if (t.shape != entry.at("shape").get<std::vector<std::uint64_t>>()) {
      throw IntegrityError("array '" + name + "' shape disagrees with manifest",
                           13);
    }
    out.arrays.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace shortlens::store
