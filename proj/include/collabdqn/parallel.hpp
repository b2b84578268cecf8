#pragma once

#include <cstddef>
#include <functional>

namespace collabdqn {

/// Worker count: 1 when `deterministic`, otherwise COLLABDQN_THREADS if set,
/// else the hardware concurrency.
int worker_count(bool deterministic = false);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// visited exactly once; the first exception thrown is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// Keeps large activation buffers on the heap between training steps instead
/// of returning them to the OS (avoids page-fault storms). glibc only; a
/// no-op elsewhere. Idempotent.
void configure_allocator();

}  // namespace collabdqn
