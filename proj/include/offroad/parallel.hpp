#pragma once

#include <cstddef>
#include <functional>

namespace offroad {

// Worker cap from PLANNER_THREADS, defaulting to the hardware concurrency.
int worker_threads();

// Runs fn(i) for i in [0, n). Work is split in contiguous chunks; fn must be
// safe to call concurrently for distinct i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace offroad
