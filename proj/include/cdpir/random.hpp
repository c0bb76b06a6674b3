#pragma once

#include <cstdint>
#include <random>

namespace cdpir {

using Engine = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds from a parent
/// seed and a stream tag so that every entry/step owns its own generator.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Engine make_engine(std::uint64_t seed, std::uint64_t tag = 0) { return Engine(mix_seed(seed, tag)); }

}  // namespace cdpir
