#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace nucleo {

/// Number of worker threads for math kernels. Capped by the NUCLEO_THREADS
/// environment variable; defaults to the hardware concurrency.
inline int kernel_threads() {
    static const int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (const char* env = std::getenv("NUCLEO_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return n;
}

/// Runs fn(i) for i in [0, count). Work is split into contiguous index blocks,
/// one per thread, so writes to disjoint per-index slots stay race-free and
/// results do not depend on the thread count.
inline void parallel_for(long count, const std::function<void(long)>& fn) {
    if (count <= 0) return;
    int threads = kernel_threads();
    if (threads <= 1 || count < 2) {
        for (long i = 0; i < count; ++i) fn(i);
        return;
    }
    threads = static_cast<int>(std::min<long>(threads, count));
    long block = (count + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        long lo = t * block;
        long hi = std::min(count, lo + block);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (long i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace nucleo
