#pragma once

// Minimal fork-join helper. EBM_THREADS caps the worker count (default: hardware threads).

#include <cstddef>
#include <functional>

namespace cem {

int thread_count();

// Runs fn(i) for i in [0, n). Results must not depend on scheduling; the first exception
// thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cem
