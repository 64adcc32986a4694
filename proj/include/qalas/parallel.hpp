#pragma once

#include <cstddef>
#include <functional>

namespace qalas {

// Thread count from an explicit request (> 0), else QALAS_THREADS, else 1.
int resolve_threads(int requested = 0);

// Splits [0, n) into `threads` contiguous chunks and runs body(begin, end) on
// each. Chunk boundaries depend only on n and threads; callers write results
// to disjoint slots so output never depends on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& body);

} // namespace qalas
