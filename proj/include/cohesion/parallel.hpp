#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cohesion {

// Kernel thread cap: COHESION_THREADS if set and positive, otherwise the
// hardware concurrency.
inline unsigned kernel_threads() {
  if (const char* env = std::getenv("COHESION_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n). Each index is processed by exactly one thread,
// so per-row results never depend on the thread count. Small ranges run inline.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_per_thread = 64) {
  const std::size_t threads =
      std::min<std::size_t>(kernel_threads(), (n + min_per_thread - 1) / std::max<std::size_t>(1, min_per_thread));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace cohesion
