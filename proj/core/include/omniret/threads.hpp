#pragma once

#include <cstddef>
#include <functional>

namespace omniret {

/// Worker cap: min(hardware_concurrency, OMNIRET_THREADS if set). At least 1.
std::size_t max_threads();

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks across
/// at most max_threads() workers; callers get determinism by writing to
/// disjoint, preallocated slots. Exceptions from workers are rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace omniret
