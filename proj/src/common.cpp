#include "hashmesh/common.hpp"

#include <algorithm>

namespace hashmesh {

WorkerPool::WorkerPool(unsigned threads) : workers_(std::max(1u, threads)) {
  if (workers_ == 1) return;
  threads_.reserve(workers_);
  for (unsigned w = 0; w < workers_; ++w) {
    threads_.emplace_back([this, w] { thread_main(w); });
  }
}

WorkerPool::~WorkerPool() {
  if (workers_ == 1) return;
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  start_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::for_chunks(std::size_t n, const ChunkFn& fn) {
  if (n == 0) return;
  if (workers_ == 1) {
    fn(0, n, 0);
    return;
  }
  std::unique_lock lock(mu_);
  job_ = &fn;
  job_n_ = n;
  pending_ = workers_;
  first_error_ = nullptr;
  ++generation_;
  start_cv_.notify_all();
  done_cv_.wait(lock, [this] { return pending_ == 0; });
  job_ = nullptr;
  if (first_error_) std::rethrow_exception(first_error_);
}

void WorkerPool::thread_main(unsigned worker) {
  std::uint64_t seen = 0;
  for (;;) {
    const ChunkFn* fn = nullptr;
    std::size_t n = 0;
    {
      std::unique_lock lock(mu_);
      start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      fn = job_;
      n = job_n_;
    }
    const std::size_t chunk = (n + workers_ - 1) / workers_;
    const std::size_t begin = std::min(n, worker * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    std::exception_ptr err;
    if (begin < end) {
      try {
        (*fn)(begin, end, worker);
      } catch (...) {
        err = std::current_exception();
      }
    }
    {
      std::lock_guard lock(mu_);
      if (err && !first_error_) first_error_ = err;
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }
}

}  // namespace hashmesh
