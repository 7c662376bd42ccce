#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace oscar {

// Worker cap: min(hardware_concurrency, OSCAR_LAB_THREADS if set).
inline int worker_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("OSCAR_LAB_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < hw) hw = cap;
  }
  return hw;
}

// Runs fn(i) for i in [0, n). Work is split statically so the assignment of
// indices to workers never depends on timing; callers that need determinism
// must still reduce per-index results in index order.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; i++) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; w++) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace oscar
