#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace neuronscope {

/// Incremental FNV-1a (64-bit). Used for artifact fingerprints and seed
/// derivation; not cryptographic.
class Fnv1a64 {
 public:
  Fnv1a64& update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a64& update(std::string_view s) { return update(s.data(), s.size()); }
  Fnv1a64& update_u64(uint64_t v);
  uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string fingerprint_bytes(const void* data, size_t n);
std::string fingerprint_file(const std::string& path);

}  // namespace neuronscope
