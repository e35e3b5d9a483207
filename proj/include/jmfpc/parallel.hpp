#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace jmfpc {

/// Runs fn(0..n-1) on up to `workers` threads with static chunking. Results must be written
/// to per-index slots so the outcome does not depend on the worker count. The exception of
/// the lowest failing index is rethrown.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace jmfpc
