#pragma once

#include <cstdint>
#include <functional>

namespace voldet {

/// Process-wide worker count for parallel_for. 0 = hardware concurrency.
void set_thread_count(int n);
int thread_count();

/// Runs fn(i) for i in [0, n) split into contiguous chunks across threads.
/// Each index must write only its own outputs; chunk boundaries never affect
/// results, so output is bit-identical for any thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

/// Chunked variant: fn(begin, end) over disjoint ranges covering [0, n).
void parallel_for_ranges(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& fn);

} // namespace voldet
