#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace higfa {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent child streams.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive a child seed from a parent seed and a path of indices, so that
/// e.g. sample j of image i gets the same stream no matter which thread or
/// in which order it is generated.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(base, path));
}

}  // namespace higfa
