#pragma once

#include <cstdint>
#include <string_view>

namespace icvlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Child seed as a stable hash of (root seed, purpose string, index).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ fnv1a(purpose)) + index);
}

}  // namespace icvlab
