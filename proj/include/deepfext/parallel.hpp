#pragma once

#include <cstdint>
#include <functional>

namespace dfx {

// Worker cap for internal loops. Defaults to the hardware concurrency,
// overridable by the DEEP_FEXT_THREADS environment variable or set_thread_cap().
// Results are bit-identical at any cap: every output element is computed
// wholly inside one worker with a fixed iteration order.
int thread_cap();
void set_thread_cap(int n);

// Runs fn(begin, end) over a static partition of [0, n). Serial when the
// range is small or the cap is 1.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn,
                  std::int64_t grain = 1024);

}  // namespace dfx
