#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hashmesh {

// Error taxonomy. The CLI maps these onto stable exit codes:
// ConfigError -> 2, TransportError -> 3, NumericError -> 4.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A peer spoke the wrong protocol (sequence/op/length mismatch).
class ProtocolError : public TransportError {
 public:
  using TransportError::TransportError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; good enough to derive independent streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Folds a tuple of stream labels into one seed. Used everywhere a
// deterministic per-(epoch, batch, layer, sample, ...) RNG is needed so
// results do not depend on thread scheduling.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x8c99f2f4a1b6d3e7ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ p);
  return h;
}

inline std::mt19937_64 derive_rng(std::initializer_list<std::uint64_t> parts) {
  return std::mt19937_64(derive_seed(parts));
}

// Fixed-chunk worker pool: [0, n) is split into one contiguous chunk per
// worker, so the work assignment (and any per-worker accumulation order)
// is a pure function of (n, worker count), never of scheduling.
class WorkerPool {
 public:
  explicit WorkerPool(unsigned threads);
  ~WorkerPool();

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  unsigned size() const { return workers_; }

  using ChunkFn = std::function<void(std::size_t begin, std::size_t end, unsigned worker)>;
  void for_chunks(std::size_t n, const ChunkFn& fn);

 private:
  void thread_main(unsigned worker);

  unsigned workers_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const ChunkFn* job_ = nullptr;
  std::size_t job_n_ = 0;
  std::uint64_t generation_ = 0;
  unsigned pending_ = 0;
  bool stop_ = false;
  std::exception_ptr first_error_;
};

}  // namespace hashmesh
