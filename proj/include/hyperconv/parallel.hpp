#pragma once

#include <cstdint>
#include <functional>

namespace hconv {

/// Worker count used by batch-parallel kernels. Results never depend on it:
/// work is split over independent samples and every cross-sample reduction
/// runs serially in index order.
void set_num_threads(int n);
int num_threads();

/// Calls fn(i) for i in [0, n), split into contiguous chunks across workers.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace hconv
