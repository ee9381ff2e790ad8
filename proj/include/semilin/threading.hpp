#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace semilin {

// Fixed-size worker pool. The thread count comes from SEMILIN_THREADS (default:
// hardware concurrency, capped at 16) and can be overridden for tests.
class ThreadPool {
  public:
    static ThreadPool& instance();

    int thread_count() const { return n_threads_; }
    // Joins current workers and respawns with the new count. Not thread-safe
    // against concurrent parallel_for calls.
    void set_thread_count(int n);

    // Splits [0,n) into fixed chunks of `grain` and runs fn(begin,end) on the
    // pool. Chunk boundaries depend only on (n, grain), never on the thread
    // count, so per-chunk results are reproducible.
    void parallel_for(size_t n, size_t grain, const std::function<void(size_t, size_t)>& fn);

    ~ThreadPool();

  private:
    ThreadPool();
    struct Impl;
    Impl* impl_;
    int n_threads_;
};

// Deterministic summation: serial sums over fixed blocks of 4096, block results
// combined in index order. Identical result at any thread count.
double det_sum(const double* x, size_t n);

// Threaded variant of the same contract: block_sum(begin,end) must compute its
// partial serially; partials are combined in block order on the caller thread.
double det_parallel_sum(size_t n, size_t block,
                        const std::function<double(size_t, size_t)>& block_sum);

}  // namespace semilin
