#pragma once

#include <cstdint>
#include <functional>

namespace lsdr {

/// Worker count: LSDR_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
int worker_count();

/// Calls body(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; callers write results into per-index slots so the reduction
/// order stays fixed. The first exception thrown by a body is rethrown.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& body);

}  // namespace lsdr
