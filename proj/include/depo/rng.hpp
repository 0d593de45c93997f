#pragma once

// Seed derivation. Every random stream in a run is keyed by the master seed
// plus a path of integers (stream tag, step, group, member, ...), so a
// stream's contents never depend on scheduling or on how many other
// streams were drawn before it.

#include <cstdint>
#include <initializer_list>
#include <random>

namespace depo {

using Rng = std::mt19937_64;

/// Stream tags; values are part of the on-disk determinism contract.
enum class Stream : std::uint64_t {
  kInit = 1,
  kSftData = 2,
  kRlEpisode = 3,
  kRlRollout = 4,
  kEval = 5,
  kRatioSweep = 6,
  kKtest = 7,
  kVmfVerify = 8,
  kGradcheck = 9,
  kTask = 10,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(master);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream tag, std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t s = derive_seed(master, {static_cast<std::uint64_t>(tag)});
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Uniform draw in [0, 1) with 53 random bits; does not depend on the
/// standard library's distribution implementation.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace depo
