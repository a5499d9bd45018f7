#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace senscal {

inline int default_jobs() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Runs fn(0), ..., fn(n_tasks-1) on at most n_jobs worker threads. Callers
// write results into per-index slots so the reduction order never depends on
// scheduling. The first exception thrown by a task is rethrown after all
// workers have joined.
inline void parallel_for(int n_jobs, int n_tasks, const std::function<void(int)>& fn) {
  if (n_tasks <= 0) return;
  n_jobs = std::min(std::max(n_jobs, 1), n_tasks);
  if (n_jobs == 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }

  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n_tasks) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(n_jobs);
  for (int t = 0; t < n_jobs; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace senscal
