#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace exp3cil {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (base, tag...). Purposes that must not perturb
/// each other (policy learning vs. final training) draw from distinct tags.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(base);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(base, tags));
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kSchedule = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kHead = 4;
inline constexpr std::uint64_t kTrain = 5;
inline constexpr std::uint64_t kPolicy = 6;
inline constexpr std::uint64_t kAction = 7;
inline constexpr std::uint64_t kSplit = 8;
inline constexpr std::uint64_t kRollout = 9;
}  // namespace stream

}  // namespace exp3cil
