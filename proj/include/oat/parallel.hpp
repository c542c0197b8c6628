#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace oat {

// Worker count: OAT_THREADS env var if set, else hardware concurrency.
// Results must be reduced in item order by the caller; the partition of items
// onto threads never affects values.
inline int worker_count() {
  if (const char* env = std::getenv("OAT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(i) for i in [0, n). fn must only write to per-i slots.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&fn, w, n, workers] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace oat
