#pragma once

#include <cstdint>

namespace mcar {

// splitmix64 step; passes through the whole 2^64 state space, good enough to
// decorrelate seeds derived from small indices.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent engine seed for stream `index` under `master`. Replications and
// sub-streams must each get their own derived seed, never share an engine.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t state = master ^ (0x94d049bb133111ebULL * (index + 1));
  splitmix64(state);
  return splitmix64(state);
}

}  // namespace mcar
