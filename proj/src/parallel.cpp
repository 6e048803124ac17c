#include "hyperconv/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <stdexcept>
#include <thread>
#include <vector>

namespace hconv {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be >= 1");
  g_threads.store(n);
}

int num_threads() { return g_threads.load(); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  const auto workers = std::min<std::int64_t>(num_threads(), n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::int64_t w = 0; w < workers; ++w) {
    const std::int64_t begin = n * w / workers;
    const std::int64_t end = n * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      try {
        for (std::int64_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace hconv
