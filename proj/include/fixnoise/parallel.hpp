#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace fixnoise {

/// Worker cap from FIXNOISE_THREADS (default 1). Kernels only split work
/// across independent items whose results are combined in a fixed order, so
/// any thread count yields bit-identical output.
inline int worker_threads() {
    static const int threads = [] {
        const char* env = std::getenv("FIXNOISE_THREADS");
        if (env == nullptr) return 1;
        try {
            return std::max(1, std::stoi(env));
        } catch (...) {
            return 1;
        }
    }();
    return threads;
}

template <class F>
void parallel_for(std::size_t count, F&& body) {
    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < count; i += threads) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace fixnoise
