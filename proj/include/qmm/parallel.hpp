#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace qmm {

inline int default_thread_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return static_cast<int>(std::min(hw, 4u));
}

// Static partition of [0, n) into at most `threads` contiguous chunks;
// fn(begin, end, chunk_index) runs once per chunk. Chunk boundaries depend
// only on (n, threads), so per-chunk reductions stay reproducible run to run.
template <typename Fn>
void parallel_chunks(int n, int threads, Fn&& fn) {
    if (n <= 0) return;
    int t = std::max(1, std::min(threads, n));
    if (t == 1) {
        fn(0, n, 0);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(t));
    pool.reserve(static_cast<size_t>(t));
    int base = n / t, rem = n % t, begin = 0;
    for (int i = 0; i < t; ++i) {
        int end = begin + base + (i < rem ? 1 : 0);
        pool.emplace_back([&fn, &errors, i, begin, end] {
            try {
                fn(begin, end, i);
            } catch (...) {
                errors[static_cast<size_t>(i)] = std::current_exception();
            }
        });
        begin = end;
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace qmm
