#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace cpolab {

/// Worker cap from CPOLAB_THREADS; 1 (fully sequential) when unset or invalid.
inline int worker_count() {
  const char* env = std::getenv("CPOLAB_THREADS");
  if (env == nullptr) return 1;
  try {
    int n = std::stoi(env);
    return std::max(1, n);
  } catch (const std::exception&) {
    return 1;
  }
}

/// Evaluates fn(i) for i in [0, n) on up to `workers` threads and returns the
/// results indexed by i. Callers reduce the results in index order, so the
/// outcome does not depend on the worker count.
template <typename Fn>
auto ordered_map(std::size_t n, Fn&& fn, int workers = worker_count()) {
  using Result = decltype(fn(std::size_t{0}));
  std::vector<Result> out(n);
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  const auto nthreads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += nthreads) {
          try {
            out[i] = fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace cpolab
