#pragma once

// Minimal fork-join helper for the analysis drivers (ablation grids,
// multi-seed sweeps). Each index must write only to its own preallocated
// slot, so the merged result is identical to sequential execution and the
// thread count never changes any output.

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

#include "halo/tensor.hpp"

namespace halo {

// HALO_THREADS, default 1, clamped to [1, 64]. Read once per process.
inline int thread_budget() {
    static const int budget = [] {
        const char* env = std::getenv("HALO_THREADS");
        if (!env || !*env)
            return 1;
        const long v = std::strtol(env, nullptr, 10);
        return static_cast<int>(std::clamp(v, 1L, 64L));
    }();
    return budget;
}

template <typename Fn>
void parallel_for(index_t n, Fn&& fn) {
    const index_t workers = std::min<index_t>(thread_budget(), n);
    if (workers <= 1) {
        for (index_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (index_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (index_t i = w; i < n; i += workers)
                    fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (const auto& err : errors)
        if (err)
            std::rethrow_exception(err);
}

} // namespace halo
