#pragma once

#include <cstdint>
#include <string_view>

namespace coe {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Sub-seed for a named component: mix64(seed ^ fnv1a(name)). Components
/// draw from independent streams, so adding one never perturbs the others.
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view component) noexcept {
  return mix64(seed ^ fnv1a(component));
}

}  // namespace coe
