#pragma once

#include <cstddef>
#include <functional>

namespace fastgc {

/// Pin the kernel thread count. 0 restores the default (hardware concurrency).
void set_kernel_threads(unsigned n);

/// Currently pinned kernel thread count.
unsigned kernel_threads();

/// Run body(begin, end) over a partition of [0, n). Splits into contiguous
/// chunks, one per worker, so every index is written by exactly one thread and
/// results are bit-identical regardless of thread count. Work below
/// ~1M flops (n * flops_per_item) runs inline on the calling thread.
void parallel_for(std::size_t n, std::size_t flops_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace fastgc
