#pragma once

#include <cstddef>
#include <functional>

namespace neuronscope {

/// Runs jobs 0..n_jobs-1 on up to n_threads workers. Each job writes only its
/// own slot, so results are independent of scheduling; callers reduce in job
/// order afterwards. Exceptions from jobs are rethrown on the calling thread.
void parallel_for(size_t n_jobs, int n_threads, const std::function<void(size_t)>& job);

/// Default worker count: hardware concurrency clamped to [1, 8].
int default_threads();

}  // namespace neuronscope
