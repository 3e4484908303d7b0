#pragma once

#include <cstddef>
#include <functional>

namespace lrsa {

/// Worker count: hardware concurrency, capped by the LRSA_THREADS
/// environment variable when it holds a positive integer.
std::size_t worker_count();

/// Runs fn(i) for i in [0, count). Work is split into contiguous chunks; the
/// caller must make fn(i) independent of scheduling (write to slot i only).
/// The first exception thrown by any worker is rethrown on the caller.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace lrsa
