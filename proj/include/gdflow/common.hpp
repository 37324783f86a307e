#pragma once

#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gdflow {

// Error taxonomy. UsageError maps to CLI exit code 2, everything else to 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ComputationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// Worker cap shared by the few parallel loops in the library.
// GDFLOW_THREADS overrides the hardware default.
inline int max_threads() {
    static const int cached = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        if (const char* env = std::getenv("GDFLOW_THREADS")) {
            char* end = nullptr;
            long v = std::strtol(env, &end, 10);
            if (end != env && v > 0) n = static_cast<int>(v);
        }
        return n;
    }();
    return cached;
}

// Static row partitioning; each index is produced by exactly one worker so
// results do not depend on the thread count.
template <class F>
void parallel_for(int64_t n, F&& body, int64_t grain = 256) {
    const int threads = max_threads();
    if (threads <= 1 || n < 2 * grain) {
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    const int nw = static_cast<int>(std::min<int64_t>(threads, (n + grain - 1) / grain));
    std::vector<std::thread> pool;
    pool.reserve(nw);
    const int64_t chunk = (n + nw - 1) / nw;
    for (int w = 0; w < nw; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (int64_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace gdflow
