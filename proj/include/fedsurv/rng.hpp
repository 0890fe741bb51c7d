#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedsurv {

using Engine = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named sub-stream of a root seed:
///   s = mix64(root ^ fnv1a(name)), then s = mix64(s ^ mix64(i)) for each index i.
/// Every random draw in the library goes through this derivation, so a run is
/// fully determined by the single user seed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                    std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t s = mix64(root ^ fnv1a(name));
  for (std::uint64_t i : indices) s = mix64(s ^ mix64(i));
  return s;
}

inline Engine make_engine(std::uint64_t root, std::string_view name,
                          std::initializer_list<std::uint64_t> indices = {}) {
  return Engine(derive_seed(root, name, indices));
}

}  // namespace fedsurv
