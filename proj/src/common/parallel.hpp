#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace tsyn {

// Case-level parallelism: fn(i) must write only to its own output slot, so
// results are identical for any job count.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = std::min(jobs, n);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w]() {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : threads) t.join();
}

}  // namespace tsyn
