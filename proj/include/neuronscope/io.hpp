#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace neuronscope {

/// Writes a file atomically: the payload goes to `<path>.tmp.<pid>` and is
/// renamed over the final path only on success. An interrupted run never
/// leaves a partial artifact at the final path.
void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer);

std::string read_file(const std::string& path);

// Little-endian scalar IO. All integers in artifact files are LE.
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

/// Provenance sidecar written next to every artifact as `<path>.meta.json`:
/// tool version, run seed and parent-artifact fingerprints.
struct ArtifactMeta {
  uint64_t seed = 0;
  std::string command;
  std::map<std::string, std::string> parents;  // name -> fingerprint
};

void write_meta(const std::string& artifact_path, const ArtifactMeta& meta);
/// Returns empty meta if the sidecar is absent.
ArtifactMeta read_meta(const std::string& artifact_path, bool* found = nullptr);

/// Exclusive ownership of an output directory for the duration of a run.
/// Creates `<dir>/.neuronscope.lock`; refuses to start if it already exists.
class DirLock {
 public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string lock_path_;
};

}  // namespace neuronscope
