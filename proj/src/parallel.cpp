// SPDX-License-Identifier: Apache-2.0
#include "lrnet/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "gemm.hpp"

namespace lrnet {

namespace {
std::atomic<int> g_workers{0};
}

int available_cores() { return std::max(1u, std::thread::hardware_concurrency()); }

void set_num_workers(int workers) {
  g_workers.store(std::max(1, workers));
  detail::set_gemm_threads(num_workers());
}

int num_workers() {
  const int w = g_workers.load();
  return w > 0 ? w : available_cores();
}

}  // namespace lrnet
