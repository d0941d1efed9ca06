#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace rediff {

inline int worker_count() {
    if (const char* env = std::getenv("REDIFF_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Results must land in per-index slots so the
// outcome is independent of scheduling; reductions happen after the join, in
// index order. The first worker exception (by thread index) is rethrown
// after the join.
inline void parallel_for(int n, const std::function<void(int thread, int i)>& fn,
                         int n_threads = 0) {
    if (n_threads <= 0) n_threads = worker_count();
    n_threads = std::min(n_threads, n);
    if (n_threads <= 1) {
        for (int i = 0; i < n; ++i) fn(0, i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_threads);
    pool.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < n; i += n_threads) fn(t, i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);
}

}  // namespace rediff
