// Worker-thread budget. SEGREFINE_THREADS caps internal parallelism;
// 0 selects the single-threaded deterministic mode. Results are bit-identical
// for any thread count because no reduction is ever split across threads.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace segrefine {

inline int detect_worker_threads() {
    if (const char* env = std::getenv("SEGREFINE_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 0) {
            return v == 0 ? 1 : static_cast<int>(std::min<long>(v, 256));
        }
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 16u));
}

/// Number of worker threads ops may use. Read once per process.
inline int worker_threads() {
    static const int n = detect_worker_threads();
    return n;
}

/// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is handled
/// by exactly one thread, so per-element work (including its internal
/// reductions) is evaluated in a fixed order regardless of thread count.
/// fn must confine writes to its own index range.
template <typename F>
void parallel_for(std::int64_t n, F&& fn) {
    if (n <= 0) return;
    const int want = worker_threads();
    const std::int64_t chunks = std::min<std::int64_t>(want, n);
    if (chunks <= 1) {
        fn(std::int64_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(chunks) - 1);
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto run = [&](std::int64_t begin, std::int64_t end) {
        try {
            fn(begin, end);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mu);
            if (!first_error) first_error = std::current_exception();
        }
    };
    const std::int64_t base = n / chunks;
    const std::int64_t extra = n % chunks;
    std::int64_t begin = 0;
    for (std::int64_t c = 0; c < chunks; ++c) {
        const std::int64_t end = begin + base + (c < extra ? 1 : 0);
        if (c + 1 == chunks) {
            run(begin, end);
        } else {
            pool.emplace_back(run, begin, end);
        }
        begin = end;
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace segrefine
