#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace equitempo {

// FNV-1a, 64-bit. Used for architecture fingerprints and corpus-overlap
// detection, where a stable, dependency-free hash matters more than
// cryptographic strength.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t seed = 14695981039346656037ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

}  // namespace equitempo
