#pragma once

// Execution policy and deterministic random streams shared by every kernel.
//
// Each Monte Carlo or batch kernel comes in two flavours selected by Exec:
// a plain serial loop (the reference) and an OpenMP loop over fixed-size
// chunks. Chunk boundaries and per-chunk seeds never depend on the thread
// count, and partial results are reduced in chunk order, so the parallel
// result is bitwise identical for any OMP_NUM_THREADS.

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace prunability {

enum class Exec { Serial, Parallel };

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(mix_seed(seed) ^ (stream * 0xd1b54a32d192ed03ULL + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(derive_seed(seed, stream));
}

// Samples per Monte Carlo chunk. Part of the reproducibility contract:
// changing it changes every Monte Carlo estimate.
inline constexpr std::size_t kMonteCarloChunk = 1024;

inline std::size_t chunk_count(std::size_t n, std::size_t chunk) {
  return (n + chunk - 1) / chunk;
}

// Fixed-order sum of per-chunk partials (the deterministic reduction).
inline double ordered_sum(const std::vector<double>& partials) {
  double s = 0.0;
  for (double x : partials) s += x;
  return s;
}

int max_threads();
void set_threads(int n);
bool openmp_enabled();

}  // namespace prunability
