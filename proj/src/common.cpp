#include "pflrm/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace pflrm {

int worker_threads() {
  static const int n = [] {
    if (const char* env = std::getenv("PFLRM_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return std::min(v, 64);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 8));
  }();
  return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain) {
  if (n == 0) return;
  const std::size_t workers = static_cast<std::size_t>(worker_threads());
  if (workers <= 1 || n <= grain) {
    fn(0, n);
    return;
  }
  const std::size_t chunks = std::min(workers, (n + grain - 1) / grain);
  const std::size_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t lo = c * per;
    const std::size_t hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace pflrm
