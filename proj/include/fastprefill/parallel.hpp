// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace fastprefill {

// Worker count: FASTPREFILL_THREADS if set (>= 1), else hardware concurrency.
size_t worker_count();

// Calls fn(i) for i in [0, n). Each index is handled by exactly one worker, so
// callers that write only to slot i get results independent of worker count.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace fastprefill
