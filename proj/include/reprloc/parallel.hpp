#pragma once

#include <cstddef>
#include <functional>

namespace reprloc {

// Worker count: REPRLOC_THREADS when set to a positive integer, otherwise
// std::thread::hardware_concurrency() (at least 1).
std::size_t worker_count();

// Runs body(i) for i in [0, n) on up to worker_count() threads. Each index is
// visited exactly once; callers write results into per-index slots and fold
// them afterwards so that output never depends on scheduling. The first
// exception thrown by any body is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace reprloc
