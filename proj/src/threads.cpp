#include "neuronscope/threads.hpp"

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace neuronscope {

int default_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  return static_cast<int>(hw > 8 ? 8 : hw);
}

void parallel_for(size_t n_jobs, int n_threads, const std::function<void(size_t)>& job) {
  if (n_jobs == 0) return;
  const size_t workers =
      std::min<size_t>(n_jobs, static_cast<size_t>(n_threads < 1 ? 1 : n_threads));
  if (workers <= 1) {
    for (size_t i = 0; i < n_jobs; ++i) job(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n_jobs || failed.load()) return;
      try {
        job(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

}  // namespace neuronscope
