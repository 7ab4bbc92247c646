#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include <genspec/types.hpp>

namespace genspec {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}
}  // namespace detail

/// Upper bound on worker threads for chunked reductions. Results do not depend on it.
inline void set_max_threads(int n) { detail::thread_cap().store(std::max(1, n)); }
inline int max_threads() { return detail::thread_cap().load(); }

/**
 * Calls fn(chunk_index, first, count) for consecutive fixed-size chunks of [0, n) and returns the
 * per-chunk results in chunk order. Chunk boundaries depend only on n and chunk_size, so a
 * caller folding the results left to right gets the same floating-point sum for any thread count.
 */
template <class Result>
std::vector<Result> map_chunks(Index n, Index chunk_size, const std::function<Result(Index, Index, Index)>& fn) {
  const Index chunks = n == 0 ? 0 : (n + chunk_size - 1) / chunk_size;
  std::vector<Result> out(static_cast<std::size_t>(chunks));
  const int workers = static_cast<int>(std::min<Index>(max_threads(), chunks));
  auto run = [&](Index c) {
    const Index first = c * chunk_size;
    out[static_cast<std::size_t>(c)] = fn(c, first, std::min(chunk_size, n - first));
  };
  if (workers <= 1) {
    for (Index c = 0; c < chunks; ++c) run(c);
    return out;
  }
  std::atomic<Index> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (Index c = next++; c < chunks; c = next++) run(c);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
        next = chunks;
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace genspec
