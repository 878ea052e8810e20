#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace pmk {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{0};
  return n;
}
}  // namespace detail

// Worker count used by parallel_for. 0 means "not set": fall back to
// PMK_THREADS, then to the hardware concurrency.
inline void set_num_threads(int n) { detail::thread_setting() = std::max(0, n); }

[[nodiscard]] inline int num_threads() {
  if (int n = detail::thread_setting(); n > 0) return n;
  if (const char* env = std::getenv("PMK_THREADS")) {
    if (int n = std::atoi(env); n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Splits [begin, end) into contiguous blocks, one per worker. fn(lo, hi) must
// only touch state owned by its block. The first exception thrown by any worker
// is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, int workers = 0) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  std::size_t w = static_cast<std::size_t>(workers > 0 ? workers : num_threads());
  w = std::min(w, n);
  if (w <= 1) {
    fn(begin, end);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::jthread> pool;
  pool.reserve(w);
  for (std::size_t i = 0; i < w; ++i) {
    const std::size_t lo = begin + n * i / w;
    const std::size_t hi = begin + n * (i + 1) / w;
    pool.emplace_back([&, lo, hi] {
      try {
        fn(lo, hi);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace pmk
