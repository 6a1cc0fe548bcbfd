#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace pflrm {

/// Base class for all recoverable failures raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Worker-pool parallel loop over [0, n). Chunks are contiguous and assigned
/// deterministically; each invocation of `fn` owns a disjoint index range.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain = 1024);

/// Number of worker threads (PFLRM_THREADS env var, else hardware concurrency, capped at 8).
int worker_threads();

/// SplitMix64 step; used to derive independent RNG streams from (seed, index) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace pflrm
