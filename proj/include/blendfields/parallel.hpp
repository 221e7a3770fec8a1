// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace blendfields {

/// Worker count: hardware concurrency, capped by BLENDFIELDS_THREADS.
int default_worker_count();

/// Splits [0, n) into `workers` contiguous chunks and runs
/// fn(worker, begin, end) on each. Chunk boundaries depend only on n and
/// workers, so per-chunk results merged in worker order are reproducible.
void parallel_chunks(std::size_t n, int workers, const std::function<void(int, std::size_t, std::size_t)>& fn);

}  // namespace blendfields
