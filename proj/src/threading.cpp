#include "semilin/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace semilin {

struct ThreadPool::Impl {
    std::vector<std::thread> workers;
    std::mutex mu;
    std::condition_variable cv_work, cv_done;
    const std::function<void(size_t, size_t)>* job = nullptr;
    size_t job_n = 0, job_grain = 0;
    std::atomic<size_t> next_chunk{0};
    int active = 0;
    uint64_t generation = 0;
    bool stopping = false;

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(size_t, size_t)>* fn;
            size_t n, grain;
            {
                std::unique_lock lk(mu);
                cv_work.wait(lk, [&] { return stopping || generation != seen; });
                if (stopping) return;
                seen = generation;
                fn = job;
                n = job_n;
                grain = job_grain;
            }
            run_chunks(*fn, n, grain);
            {
                std::lock_guard lk(mu);
                if (--active == 0) cv_done.notify_all();
            }
        }
    }

    void run_chunks(const std::function<void(size_t, size_t)>& fn, size_t n, size_t grain) {
        size_t n_chunks = (n + grain - 1) / grain;
        for (;;) {
            size_t c = next_chunk.fetch_add(1);
            if (c >= n_chunks) return;
            size_t b = c * grain;
            fn(b, std::min(b + grain, n));
        }
    }
};

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

ThreadPool::ThreadPool() : impl_(new Impl) {
    int n = 0;
    if (const char* env = std::getenv("SEMILIN_THREADS")) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (n > 16) n = 16;
    n_threads_ = 0;
    set_thread_count(n);
}

ThreadPool::~ThreadPool() {
    set_thread_count(1);
    delete impl_;
}

void ThreadPool::set_thread_count(int n) {
    if (n < 1) n = 1;
    if (n == n_threads_) return;
    {
        std::lock_guard lk(impl_->mu);
        impl_->stopping = true;
    }
    impl_->cv_work.notify_all();
    for (auto& t : impl_->workers) t.join();
    impl_->workers.clear();
    impl_->stopping = false;
    n_threads_ = n;
    for (int i = 0; i < n - 1; ++i) impl_->workers.emplace_back([this] { impl_->worker_loop(); });
}

void ThreadPool::parallel_for(size_t n, size_t grain,
                              const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    if (grain == 0) grain = 1;
    if (n_threads_ == 1 || n <= grain) {
        for (size_t b = 0; b < n; b += grain) fn(b, std::min(b + grain, n));
        return;
    }
    {
        std::lock_guard lk(impl_->mu);
        impl_->job = &fn;
        impl_->job_n = n;
        impl_->job_grain = grain;
        impl_->next_chunk.store(0);
        impl_->active = static_cast<int>(impl_->workers.size());
        ++impl_->generation;
    }
    impl_->cv_work.notify_all();
    impl_->run_chunks(fn, n, grain);
    std::unique_lock lk(impl_->mu);
    impl_->cv_done.wait(lk, [&] { return impl_->active == 0; });
}

namespace {
constexpr size_t kSumBlock = 4096;
}

double det_sum(const double* x, size_t n) {
    double total = 0.0;
    for (size_t b = 0; b < n; b += kSumBlock) {
        size_t e = std::min(b + kSumBlock, n);
        double s = 0.0;
        for (size_t i = b; i < e; ++i) s += x[i];
        total += s;
    }
    return total;
}

double det_parallel_sum(size_t n, size_t block,
                        const std::function<double(size_t, size_t)>& block_sum) {
    if (block == 0) block = kSumBlock;
    size_t n_blocks = (n + block - 1) / block;
    std::vector<double> partial(n_blocks, 0.0);
    ThreadPool::instance().parallel_for(n_blocks, 1, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            size_t lo = b * block;
            partial[b] = block_sum(lo, std::min(lo + block, n));
        }
    });
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

}  // namespace semilin
