#pragma once

// Reproducible random streams and a minimal index-parallel loop.
//
// A stream is keyed by (seed, replicate, stream id) and is independent of the
// thread that happens to run it, so parallel results are identical to serial
// ones as long as outputs are stored by index.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

namespace proxstrata {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

using Rng = std::mt19937_64;

/// Stream ids in use.
enum class StreamId : std::uint64_t {
  Generate = 1,
  Bootstrap = 2,
  Oracle = 3,
  SolverJitter = 4,
  Study = 5,
};

/// Child seed for replicate `replicate` of `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t replicate,
                                 StreamId stream) {
  std::uint64_t h = detail::splitmix64(seed);
  h = detail::splitmix64(h ^ (replicate + 0x632be59bd9b4e019ULL));
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(stream));
  return h;
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t replicate,
                       StreamId stream) {
  const std::uint64_t h = derive_seed(seed, replicate, stream);
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(replicate),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

/// Calls fn(i) for i in [0, count) on up to `threads` workers. The first
/// exception thrown by any call is rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next.store(count);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace proxstrata
