#pragma once

#include <cstddef>
#include <functional>

namespace objsdf {

/// Worker count: OBJSDF_THREADS if set (>= 1), else hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work items
/// must write to disjoint outputs; callers reduce results in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace objsdf
