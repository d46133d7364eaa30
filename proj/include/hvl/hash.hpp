#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace hvl {

// FNV-1a, 64 bit. Used for content hashes of configs and bundles; not a
// cryptographic digest.
class Fnv1a64 {
 public:
  void update(std::string_view bytes) {
    for (unsigned char ch : bytes) {
      state_ ^= ch;
      state_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.digest();
}

inline std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace hvl
