#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace brw {

inline int default_workers() {
    if (const char* env = std::getenv("BRWLAB_WORKERS")) {
        const int w = std::atoi(env);
        if (w > 0) return w;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// Deterministic replicate-parallel map-reduce. Replicates [0, total) are cut
// into fixed chunks; workers claim chunks dynamically but each chunk's result
// lands in its own slot and the caller reduces slots in index order, so the
// aggregate is bit-identical for any worker count. `fn(chunk_index, begin,
// end)` must derive all randomness from the global replicate index.
template <class ChunkResult, class Fn>
std::vector<ChunkResult> parallel_chunks(std::uint64_t total, std::uint64_t chunk_size,
                                         int workers, Fn&& fn) {
    if (chunk_size == 0) chunk_size = 1;
    const std::uint64_t nchunks = total == 0 ? 0 : (total + chunk_size - 1) / chunk_size;
    std::vector<ChunkResult> results(nchunks);
    if (nchunks == 0) return results;

    if (workers <= 1 || nchunks == 1) {
        for (std::uint64_t c = 0; c < nchunks; ++c)
            results[c] = fn(c, c * chunk_size, std::min(total, (c + 1) * chunk_size));
        return results;
    }

    std::atomic<std::uint64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto body = [&] {
        for (;;) {
            const std::uint64_t c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= nchunks) return;
            try {
                results[c] = fn(c, c * chunk_size, std::min(total, (c + 1) * chunk_size));
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                next.store(nchunks, std::memory_order_relaxed);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int nthreads = static_cast<int>(std::min<std::uint64_t>(workers, nchunks));
    pool.reserve(nthreads);
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
    return results;
}

}  // namespace brw
