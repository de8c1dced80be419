#include "pool.hpp"

#include <algorithm>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace ssldyn::harness {

namespace {

struct WorkQueue {
    std::mutex m;
    std::deque<std::size_t> items;

    std::optional<std::size_t> pop_front() {
        std::lock_guard lock(m);
        if (items.empty()) return std::nullopt;
        const std::size_t i = items.front();
        items.pop_front();
        return i;
    }
    std::optional<std::size_t> steal_back() {
        std::lock_guard lock(m);
        if (items.empty()) return std::nullopt;
        const std::size_t i = items.back();
        items.pop_back();
        return i;
    }
};

} // namespace

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    if (workers == 1) {
        std::exception_ptr first;
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                if (!first) first = std::current_exception();
            }
        }
        if (first) std::rethrow_exception(first);
        return;
    }

    std::vector<std::unique_ptr<WorkQueue>> queues;
    for (std::size_t w = 0; w < workers; ++w) {
        queues.push_back(std::make_unique<WorkQueue>());
        const std::size_t lo = w * n / workers, hi = (w + 1) * n / workers;
        for (std::size_t i = lo; i < hi; ++i) queues[w]->items.push_back(i);
    }

    std::mutex err_m;
    std::exception_ptr first;
    auto run = [&](std::size_t self) {
        for (;;) {
            std::optional<std::size_t> job = queues[self]->pop_front();
            for (std::size_t k = 1; !job && k < workers; ++k) job = queues[(self + k) % workers]->steal_back();
            if (!job) return; // nothing is ever added, so empty everywhere means done
            try {
                fn(*job);
            } catch (...) {
                std::lock_guard lock(err_m);
                if (!first) first = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
    run(0);
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

} // namespace ssldyn::harness
