#pragma once

#include <cstddef>
#include <functional>

namespace defnet {

// 0 means "all hardware threads".
std::size_t resolve_threads(std::size_t requested);

// Calls fn(i) for every i in [0, n) on up to `threads` workers. Work items are
// claimed dynamically, so fn must only write state owned by index i. If any
// call throws, the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace defnet
