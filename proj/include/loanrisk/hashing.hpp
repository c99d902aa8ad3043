#pragma once

#include <cstdint>
#include <cstddef>
#include <initializer_list>
#include <utility>
#include <string_view>

namespace loanrisk {

/// 64-bit FNV-1a over raw bytes, continuing from `state`.
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = kFnvOffset) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= kFnvPrime;
  }
  return state;
}

constexpr std::uint64_t fnv1a64_u64(std::uint64_t value, std::uint64_t state = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    state ^= (value >> (8 * i)) & 0xffU;
    state *= kFnvPrime;
  }
  return state;
}

/// SplitMix64 finalizer; a bijective avalanche mix of a 64-bit word.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a base seed and a list of integer keys.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = mix64(seed);
  for (std::uint64_t k : keys) s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
  return s;
}

/// Counter-based uniform draw in [0, 1) keyed by (seed, a, b, c). Order independent,
/// so serial and parallel evaluation see the same values.
constexpr double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  const std::uint64_t h = derive_seed(seed, {a, b, c});
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace loanrisk

namespace loanrisk {

/// Maps a 64-bit word onto [0, n) by multiply-shift (Lemire reduction).
constexpr std::uint64_t bounded(std::uint64_t x, std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(x) * n) >> 64);
}

/// Fisher-Yates shuffle driven by a 64-bit generator; identical on every platform for a
/// given generator state, unlike std::shuffle.
template <class Vec, class Rng>
void portable_shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(bounded(rng(), i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace loanrisk
