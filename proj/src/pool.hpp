#pragma once

// Work-stealing pool for independent trials. Trial i must depend only on i
// (seed its Rng from i, never from the worker), and write its result into
// slot i; then the output is the same for every thread count.

#include <cstddef>
#include <functional>

namespace ssldyn::harness {

// Runs fn(i) for every i in [0, n) on min(threads, n) workers. Each worker
// starts on a contiguous block of indices and steals from the tail of the
// other workers' blocks once its own is empty. Returns after every call has
// finished (the barrier). The first exception thrown by any trial is
// rethrown here; the remaining trials still run.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// std::thread::hardware_concurrency(), at least 1.
std::size_t default_threads();

} // namespace ssldyn::harness
