#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fsirb {

// Worker count from FSIRB_THREADS, else the hardware concurrency.
inline int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("FSIRB_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) return v;
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc ? static_cast<int>(hc) : 1;
    }();
    return n;
}

// Runs f(i) for i in [begin, end) over contiguous slabs. Callers write to
// disjoint outputs only, so results do not depend on the thread count.
template <class F>
void parallel_for(int begin, int end, F&& f) {
    const int count = end - begin;
    if (count <= 0) return;
    const int workers = std::min(thread_count(), count);
    if (workers <= 1) {
        for (int i = begin; i < end; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const int lo = begin + static_cast<int>(static_cast<long long>(count) * w / workers);
        const int hi = begin + static_cast<int>(static_cast<long long>(count) * (w + 1) / workers);
        pool.emplace_back([lo, hi, &f] {
            for (int i = lo; i < hi; ++i) f(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace fsirb
