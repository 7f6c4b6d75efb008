#pragma once

#include <cstddef>
#include <functional>

namespace glassbox {

// Worker count: hardware concurrency, capped by GLASSBOX_THREADS when set.
std::size_t worker_threads();

// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Callers write
// results into per-index slots and reduce them in index order afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace glassbox
