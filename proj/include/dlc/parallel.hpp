// Small work-partitioning helpers. Partition boundaries depend only on the
// problem size, never on the worker count, so reductions are bit-stable.
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dlc {

/// Number of workers to use when the caller passes 0.
std::size_t default_jobs();

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// thrown by any task is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  if (jobs == 0) jobs = default_jobs();
  jobs = std::min(jobs, n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

/// Fixed chunking of [0, n): chunk c covers [begin(c), begin(c + 1)).
struct Chunking {
  std::size_t n = 0;
  std::size_t chunks = 0;

  explicit Chunking(std::size_t size, std::size_t grain = 2048)
      : n(size), chunks(size == 0 ? 0 : (size + grain - 1) / grain) {}
  std::size_t begin(std::size_t c) const { return c * n / chunks; }
  std::size_t end(std::size_t c) const { return (c + 1) * n / chunks; }
};

/// Partition-and-reduce: each chunk is folded sequentially into its own
/// accumulator, then accumulators are combined in chunk order.
template <typename Acc, typename Fold, typename Combine>
Acc chunked_reduce(std::size_t n, std::size_t jobs, const Acc& zero, Fold&& fold,
                   Combine&& combine, std::size_t grain = 2048) {
  const Chunking chunking(n, grain);
  std::vector<Acc> partial(chunking.chunks, zero);
  parallel_for(chunking.chunks, jobs, [&](std::size_t c) {
    for (std::size_t i = chunking.begin(c); i < chunking.end(c); ++i) fold(partial[c], i);
  });
  Acc total = zero;
  for (const auto& p : partial) combine(total, p);
  return total;
}

}  // namespace dlc
