#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace metakgr {

/// Worker bound: META_KGR_THREADS when set (clamped to >= 1), otherwise the
/// hardware concurrency.
inline unsigned worker_count() {
    if (const char* env = std::getenv("META_KGR_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        return n >= 1 ? static_cast<unsigned>(n) : 1u;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw >= 1 ? hw : 1u;
}

/// Runs fn(i) for i in [0, n) across workers. Each index must write only its
/// own preallocated slot so results do not depend on scheduling; any worker
/// exception is rethrown after the pool drains.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mu;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!failed.exchange(true)) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace metakgr
