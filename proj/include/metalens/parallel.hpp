#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace metalens {

/// Worker count: METALENS_THREADS if set, otherwise hardware concurrency.
inline int thread_count() {
  if (const char* s = std::getenv("METALENS_THREADS")) {
    const int n = std::atoi(s);
    if (n >= 1) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs fn(begin, end) over fixed-size chunks of [0, n). Chunk boundaries
/// depend only on n, never on the worker count, so any per-chunk output the
/// caller stores by chunk index is reproducible across machines.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                         std::size_t min_chunk = 1024) {
  if (n == 0) return;
  const int workers = thread_count();
  if (workers == 1 || n <= min_chunk) {
    fn(0, n);
    return;
  }
  const std::size_t chunk = std::max(min_chunk, (n + 63) / 64);
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t b = next.fetch_add(chunk);
        if (b >= n) return;
        fn(b, std::min(b + chunk, n));
      }
    });
  for (auto& t : pool) t.join();
}

}  // namespace metalens
