#pragma once

#include <cstdint>
#include <random>

namespace dffl {

// Independent random streams. Each draw site names its purpose so that adding
// a client or a new draw never shifts another stream.
enum class Purpose : std::uint64_t {
  data = 1,
  test_data = 2,
  init_params = 3,
  corruption = 4,
  train = 5,
  compute_jitter = 6,
  holdout_split = 7,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable hash of (root seed, client, round, purpose).
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t client,
                                           std::uint64_t round, Purpose purpose) {
  std::uint64_t h = splitmix64(root);
  h = splitmix64(h ^ splitmix64(client + 0x1000));
  h = splitmix64(h ^ splitmix64(round + 0x2000));
  h = splitmix64(h ^ splitmix64(static_cast<std::uint64_t>(purpose) + 0x3000));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace dffl
