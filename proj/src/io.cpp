#include "neuronscope/io.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/version.hpp"

namespace fs = std::filesystem;

namespace neuronscope {

void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot open for writing: " + tmp);
    try {
      writer(out);
    } catch (...) {
      out.close();
      std::remove(tmp.c_str());
      throw;
    }
    out.flush();
    if (!out) {
      out.close();
      std::remove(tmp.c_str());
      throw ArtifactError("write failed: " + tmp);
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw ArtifactError("rename failed for " + path + ": " + ec.message());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

namespace {
template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    std::memcpy(&bits, &v, 8);
  } else {
    bits = static_cast<uint64_t>(v);
  }
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw ArtifactError("unexpected end of file");
  uint64_t bits = 0;
  for (size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) {
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  } else {
    return static_cast<T>(bits);
  }
}
}  // namespace

void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, v); }
uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }
double read_f64(std::istream& is) { return read_le<double>(is); }

void write_meta(const std::string& artifact_path, const ArtifactMeta& meta) {
  nlohmann::json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["seed"] = meta.seed;
  j["command"] = meta.command;
  nlohmann::json parents = nlohmann::json::object();
  for (const auto& [name, fp] : meta.parents) parents[name] = fp;
  j["parents"] = parents;
  const std::string body = dump_canonical(j);
  atomic_write_file(artifact_path + ".meta.json",
                    [&](std::ostream& os) { os << body << "\n"; });
}

ArtifactMeta read_meta(const std::string& artifact_path, bool* found) {
  ArtifactMeta meta;
  const std::string path = artifact_path + ".meta.json";
  if (!fs::exists(path)) {
    if (found) *found = false;
    return meta;
  }
  if (found) *found = true;
  const nlohmann::json j = parse_json_file(path);
  meta.seed = j.value("seed", uint64_t{0});
  meta.command = j.value("command", std::string{});
  if (j.contains("parents")) {
    for (auto it = j["parents"].begin(); it != j["parents"].end(); ++it) {
      meta.parents[it.key()] = it.value().get<std::string>();
    }
  }
  return meta;
}

DirLock::DirLock(const std::string& dir) {
  fs::create_directories(dir);
  lock_path_ = (fs::path(dir) / ".neuronscope.lock").string();
  // O_EXCL-style create: fails if another run owns the directory.
  if (fs::exists(lock_path_)) {
    throw ArtifactError("output directory is locked by another run (" + lock_path_ +
                        "); remove the lock file if that run is dead");
  }
  std::ofstream f(lock_path_);
  if (!f) throw ArtifactError("cannot create lock file: " + lock_path_);
  f << ::getpid() << "\n";
}

DirLock::~DirLock() { std::remove(lock_path_.c_str()); }

}  // namespace neuronscope
