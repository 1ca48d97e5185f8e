#ifndef LTX_PARALLEL_HPP
#define LTX_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace ltx {

// Worker count from the LTX_THREADS environment variable (default 1).
int thread_count();

// Runs fn(i) for i in [0, n) on thread_count() workers. Callers write results
// by index, so output order never depends on scheduling. The first exception
// thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ltx

#endif  // LTX_PARALLEL_HPP
