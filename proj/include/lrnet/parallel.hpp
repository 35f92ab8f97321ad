// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace lrnet {

/// Worker count used by batch-parallel kernels. Defaults to the number of
/// available cores; verification paths force 1.
void set_num_workers(int workers);
int num_workers();
int available_cores();

/// Runs body(i) for i in [begin, end) with static partitioning across the
/// configured workers. Each index is visited exactly once; callers must only
/// write to disjoint outputs.
template <typename F>
void parallel_for(std::ptrdiff_t begin, std::ptrdiff_t end, F&& body) {
#if defined(_OPENMP)
  const int workers = num_workers();
  if (workers > 1 && end - begin > 1) {
#pragma omp parallel for schedule(static) num_threads(workers)
    for (std::ptrdiff_t i = begin; i < end; ++i) body(i);
    return;
  }
#endif
  for (std::ptrdiff_t i = begin; i < end; ++i) body(i);
}

}  // namespace lrnet
