#pragma once

#include <cstddef>
#include <functional>

namespace echoreg {

/// Worker count: ECHOREG_NUM_THREADS if set (>=1), else hardware concurrency.
int num_threads();

/// Runs body(i) for i in [0, n) across up to num_threads() workers.
/// Iterations must be independent; each index is visited exactly once.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace echoreg
