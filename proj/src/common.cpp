#include "neuronscope/hashing.hpp"
#include "neuronscope/rng.hpp"

#include <cstdio>
#include <fstream>

#include "neuronscope/errors.hpp"

namespace neuronscope {

Fnv1a64& Fnv1a64::update_u64(uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  return update(buf, 8);
}

std::string Fnv1a64::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
  return std::string(buf);
}

std::string fingerprint_bytes(const void* data, size_t n) {
  Fnv1a64 h;
  h.update(data, n);
  return h.hex();
}

std::string fingerprint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot open artifact for fingerprinting: " + path);
  Fnv1a64 h;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h.update(buf, static_cast<size_t>(f.gcount()));
  }
  return h.hex();
}

uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a, uint64_t b) {
  Fnv1a64 h;
  h.update_u64(base).update(tag).update_u64(a).update_u64(b);
  return h.digest();
}

}  // namespace neuronscope
