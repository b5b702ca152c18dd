#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace defnet {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for the stream identified by `parts` under `base`. Stable across
// platforms, so (seed, sample index) style derivations are reproducible.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> parts) {
  std::uint64_t s = mix_seed(base);
  for (std::uint64_t p : parts) s = mix_seed(s ^ mix_seed(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Uniform double in [0, 1) built from the top 53 bits; unlike
// std::uniform_real_distribution this is identical on every standard library.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller on uniform01, portable for the same reason.
double standard_normal(Rng& rng);

// Uniform integer in [0, n) by rejection; n > 0.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

}  // namespace defnet
