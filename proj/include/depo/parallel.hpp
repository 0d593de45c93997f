#pragma once

#include <cstddef>
#include <functional>

namespace depo {

/// Worker count used by parallel_for; 0 means hardware concurrency.
void set_worker_count(unsigned n);
unsigned worker_count();

/// Runs f(0) ... f(n-1) on up to worker_count() threads. Each index must
/// write only to its own output slot; callers reduce afterwards in index
/// order, which keeps results independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f);

}  // namespace depo
