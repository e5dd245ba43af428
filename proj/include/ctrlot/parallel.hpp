#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ctrlot {

/// Runs f(i) for i in [0, n) on up to `threads` workers (0 = hardware concurrency).
/// Work is strided so the index→worker mapping is fixed; results must not depend on it.
template <typename Func>
void parallel_for(std::size_t n, unsigned threads, Func&& f) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned id = 0; id < threads; ++id) {
    pool.emplace_back([&, id] {
      try {
        for (std::size_t i = id; i < n; i += threads) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ctrlot
