#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace metabridge {

/// Runs fn(i) for every i in [0, n) on up to `threads` workers. Items are
/// claimed from a shared counter, so which thread runs which index is
/// nondeterministic — callers must write into per-index slots and reduce in
/// index order afterwards, which keeps results bit-identical for every thread
/// count. The first exception thrown by any worker is rethrown after all
/// workers have stopped.
template <typename Fn>
void parallel_for_indexed(int64_t n, int64_t threads, Fn&& fn) {
  if (n <= 0) return;
  const int64_t workers = std::min<int64_t>(threads, n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  auto body = [&]() {
    for (;;) {
      if (failed.load()) return;
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int64_t t = 0; t < workers; ++t) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace metabridge
