#include "deepfext/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace dfx {

namespace {

int read_env_cap() {
    if (const char* env = std::getenv("DEEP_FEXT_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return std::min(v, 256);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(std::min(hw, 16u));
}

std::atomic<int> g_cap{0};  // 0 = not resolved yet

}  // namespace

int thread_cap() {
    int c = g_cap.load(std::memory_order_relaxed);
    if (c == 0) {
        c = read_env_cap();
        g_cap.store(c, std::memory_order_relaxed);
    }
    return c;
}

void set_thread_cap(int n) { g_cap.store(std::max(1, n), std::memory_order_relaxed); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn,
                  std::int64_t grain) {
    if (n <= 0) return;
    int cap = thread_cap();
    std::int64_t max_workers = std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, grain));
    int workers = static_cast<int>(std::min<std::int64_t>(cap, max_workers));
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::int64_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        std::int64_t b = t * chunk;
        std::int64_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace dfx
