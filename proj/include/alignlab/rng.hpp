#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace alignlab {

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Independent generator per (seed, stream name, indices), so adding or
// reordering components does not shift another component's draws.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::string_view stream,
                                  std::initializer_list<std::uint64_t> indices = {}) {
  const std::uint64_t h = stable_hash(stream);
  std::vector<std::uint32_t> words = {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  for (auto i : indices) {
    words.push_back(static_cast<std::uint32_t>(i));
    words.push_back(static_cast<std::uint32_t>(i >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace alignlab
