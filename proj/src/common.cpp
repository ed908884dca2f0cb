#include "ftsep/common.hpp"

#include <atomic>

namespace ftsep {

namespace {
std::atomic<int> g_thread_count{0};  // 0 = hardware concurrency
thread_local bool t_inside_parallel = false;
}  // namespace

void set_thread_count(int n) { g_thread_count.store(n); }

int thread_count() {
    int t = g_thread_count.load();
    if (t > 0) return t;
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
}

bool inside_parallel_region() { return t_inside_parallel; }

void enter_parallel_region(bool on) { t_inside_parallel = on; }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int nt = thread_count();
    if (nt > n) nt = static_cast<int>(n);
    // No nesting: workers of an outer region run their share inline.
    if (nt <= 1 || t_inside_parallel) {
        body(0, n);
        return;
    }
    const int64_t chunk = (n + nt - 1) / nt;
    std::vector<std::thread> pool;
    pool.reserve(nt - 1);
    for (int w = 1; w < nt; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] {
            t_inside_parallel = true;
            body(lo, hi);
            t_inside_parallel = false;
        });
    }
    t_inside_parallel = true;
    body(0, std::min<int64_t>(n, chunk));
    t_inside_parallel = false;
    for (auto& th : pool) th.join();
}

}  // namespace ftsep
