#pragma once

#include <cstdint>
#include <random>

namespace implab {

// Stream purposes, used as mixing tags so that independent parts of a
// replicate never share an engine state.
enum class Stream : std::uint64_t {
  kNoise = 1,
  kGraph = 2,
  kRecipe = 3,
  kBootstrap = 4,
  kFolds = 5,
  kEnvInput = 6,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic engine for (seed, purpose, replicate). Same triple gives the
// same stream regardless of call order elsewhere.
inline std::mt19937_64 make_stream(std::uint64_t seed, Stream purpose,
                                   std::uint64_t replicate = 0) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ (static_cast<std::uint64_t>(purpose) << 32));
  s = splitmix64(s ^ replicate);
  return std::mt19937_64(s);
}

}  // namespace implab
