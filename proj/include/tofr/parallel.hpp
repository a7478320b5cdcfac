#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace tofr {

inline int& worker_count() {
    static int n = int(std::thread::hardware_concurrency());
    return n;
}

// Runs fn(i) for i in [0, n). Work items own disjoint outputs, so results are
// identical for any worker count.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::max(1, worker_count());
    if (workers == 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto body = [&] {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
}

}  // namespace tofr
