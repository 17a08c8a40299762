#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

#include "hashmesh/common.hpp"
#include "hashmesh/transport.hpp"

#include "json.hpp"

namespace hashmesh::transport {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kForwardGather: return "forward_gather";
    case Phase::kErrorSync: return "error_sync";
    case Phase::kGradReduce: return "grad_reduce";
    case Phase::kControl: return "control";
  }
  return "?";
}

const char* payload_kind_name(PayloadKind k) {
  switch (k) {
    case PayloadKind::kActivations: return "activations";
    case PayloadKind::kErrors: return "errors";
    case PayloadKind::kErrorPartials: return "error_partials";
    case PayloadKind::kWeights: return "weights";
    case PayloadKind::kRaw: return "raw";
    case PayloadKind::kNone: return "none";
  }
  return "?";
}

std::string CommStats::to_json_string() const {
  nlohmann::json j;
  j["bytes_sent"] = bytes_sent;
  j["bytes_received"] = bytes_received;
  j["collective_calls"] = collective_calls;
  for (std::size_t p = 0; p < kNumPhases; ++p) {
    j["phases"][phase_name(static_cast<Phase>(p))] = {
        {"bytes_sent", phase[p].bytes_sent},
        {"bytes_received", phase[p].bytes_received},
        {"calls", phase[p].calls},
    };
  }
  return j.dump();
}

CommStats& CommStats::operator+=(const CommStats& o) {
  bytes_sent += o.bytes_sent;
  bytes_received += o.bytes_received;
  collective_calls += o.collective_calls;
  for (std::size_t p = 0; p < kNumPhases; ++p) {
    phase[p].bytes_sent += o.phase[p].bytes_sent;
    phase[p].bytes_received += o.phase[p].bytes_received;
    phase[p].calls += o.phase[p].calls;
  }
  return *this;
}

namespace {

struct Generation {
  char op = 0;
  PayloadKind kind = PayloadKind::kNone;
  Phase phase = Phase::kControl;
  std::uint32_t arrived = 0;
  std::uint32_t consumed = 0;
  bool ready = false;
  bool failed = false;
  bool reduce_len_set = false;
  std::size_t reduce_len = 0;
  std::string error;
  std::vector<std::vector<std::byte>> gather_deposits;
  std::vector<std::vector<float>> reduce_deposits;
  std::vector<float> reduced;
};

}  // namespace

struct LoopbackCluster::Shared {
  std::uint32_t n;
  std::uint64_t sched_seed;
  std::mutex mu;
  std::condition_variable cv;
  std::map<std::uint64_t, Generation> generations;
  bool record = false;
  std::vector<CallRecord> log;
  bool poisoned = false;
  std::string poison_msg;

  // Marks the generation poisoned so every waiting rank throws instead of
  // blocking forever on a peer that misused the protocol.
  [[noreturn]] void fail(Generation& g, const std::string& message) {
    g.failed = true;
    g.error = message;
    cv.notify_all();
    throw ProtocolError(message);
  }

  void maybe_jitter(std::uint64_t seq, std::uint32_t rank) {
    if (sched_seed == 0) return;
    const std::uint64_t spins = derive_seed({sched_seed, seq, rank}) % 4;
    for (std::uint64_t i = 0; i < spins; ++i) std::this_thread::yield();
  }
};

namespace {

class LoopbackEndpoint final : public CollectiveEndpoint {
 public:
  LoopbackEndpoint(std::shared_ptr<LoopbackCluster::Shared> shared, std::uint32_t rank)
      : shared_(std::move(shared)), rank_(rank) {}

  std::uint32_t node_id() const override { return rank_; }
  std::uint32_t world_size() const override { return shared_->n; }

  std::vector<std::vector<std::byte>> all_gather_var(std::span<const std::byte> local,
                                                     PayloadKind kind, Phase phase) override {
    auto& sh = *shared_;
    const std::uint64_t seq = seq_++;
    sh.maybe_jitter(seq, rank_);
    std::unique_lock lock(sh.mu);
    Generation& g = begin(sh, seq, 'G', kind, phase);
    g.gather_deposits[rank_].assign(local.begin(), local.end());
    complete_or_wait(sh, lock, seq, g, [&](Generation& gen) {
      if (sh.record) {
        CallRecord rec{seq, 'G', gen.kind, gen.phase, {}};
        for (const auto& d : gen.gather_deposits) rec.bytes_per_rank.push_back(d.size());
        sh.log.push_back(std::move(rec));
      }
    });
    Generation& done = sh.generations.at(seq);
    auto result = done.gather_deposits;  // copy: every rank gets its own
    count_gather(done, kind, phase, local.size());
    finish(sh, seq, done);
    return result;
  }

  void all_reduce_sum(std::span<float> inout, PayloadKind kind, Phase phase) override {
    auto& sh = *shared_;
    const std::uint64_t seq = seq_++;
    sh.maybe_jitter(seq, rank_);
    std::unique_lock lock(sh.mu);
    Generation& g = begin(sh, seq, 'R', kind, phase);
    if (!g.reduce_len_set) {
      g.reduce_len_set = true;
      g.reduce_len = inout.size();
    } else if (g.reduce_len != inout.size()) {
      sh.fail(g, "all_reduce_sum: rank " + std::to_string(rank_) + " supplied length " +
                     std::to_string(inout.size()) + ", expected " + std::to_string(g.reduce_len));
    }
    g.reduce_deposits[rank_].assign(inout.begin(), inout.end());
    complete_or_wait(sh, lock, seq, g, [&](Generation& gen) {
      // Fixed rank-order summation for reproducibility.
      gen.reduced = gen.reduce_deposits[0];
      for (std::uint32_t r = 1; r < sh.n; ++r) {
        const auto& v = gen.reduce_deposits[r];
        for (std::size_t i = 0; i < gen.reduced.size(); ++i) gen.reduced[i] += v[i];
      }
      if (sh.record) {
        CallRecord rec{seq, 'R', gen.kind, gen.phase, {}};
        rec.bytes_per_rank.assign(sh.n, gen.reduced.size() * sizeof(float));
        sh.log.push_back(std::move(rec));
      }
    });
    Generation& done = sh.generations.at(seq);
    std::copy(done.reduced.begin(), done.reduced.end(), inout.begin());
    const std::uint64_t bytes = inout.size() * sizeof(float);
    bump(kind, phase, bytes, bytes);
    finish(sh, seq, done);
  }

  void barrier() override {
    auto& sh = *shared_;
    const std::uint64_t seq = seq_++;
    sh.maybe_jitter(seq, rank_);
    std::unique_lock lock(sh.mu);
    Generation& g = begin(sh, seq, 'B', PayloadKind::kNone, Phase::kControl);
    complete_or_wait(sh, lock, seq, g, [&](Generation& gen) {
      if (sh.record) {
        sh.log.push_back(CallRecord{seq, 'B', gen.kind, gen.phase,
                                    std::vector<std::uint64_t>(sh.n, 0)});
      }
    });
    Generation& done = sh.generations.at(seq);
    bump(PayloadKind::kNone, Phase::kControl, 0, 0);
    finish(sh, seq, done);
  }

  CommStats stats() const override {
    std::lock_guard lock(stats_mu_);
    return stats_;
  }

 private:
  Generation& begin(LoopbackCluster::Shared& sh, std::uint64_t seq, char op, PayloadKind kind,
                    Phase phase) {
    if (sh.poisoned) throw TransportError(sh.poison_msg);
    Generation& g = sh.generations[seq];
    if (g.failed) throw ProtocolError(g.error);
    if (g.arrived == 0 && g.consumed == 0 && g.op == 0) {
      g.op = op;
      g.kind = kind;
      g.phase = phase;
      g.gather_deposits.resize(sh.n);
      g.reduce_deposits.resize(sh.n);
    } else if (g.op != op || g.kind != kind) {
      sh.fail(g, std::string("collective mismatch at seq ") + std::to_string(seq) + ": rank " +
                     std::to_string(rank_) + " called op '" + op + "'/" +
                     payload_kind_name(kind) + " but generation is op '" + g.op + "'/" +
                     payload_kind_name(g.kind));
    }
    return g;
  }

  template <typename Finalize>
  void complete_or_wait(LoopbackCluster::Shared& sh, std::unique_lock<std::mutex>& lock,
                        std::uint64_t seq, Generation& g, Finalize&& finalize) {
    ++g.arrived;
    if (g.arrived == sh.n) {
      finalize(g);
      g.ready = true;
      sh.cv.notify_all();
    } else {
      sh.cv.wait(lock, [&] {
        if (sh.poisoned) return true;
        const Generation& cur = sh.generations.at(seq);
        return cur.ready || cur.failed;
      });
      if (sh.poisoned) throw TransportError(sh.poison_msg);
      const Generation& cur = sh.generations.at(seq);
      if (cur.failed) throw ProtocolError(cur.error);
    }
  }

  void finish(LoopbackCluster::Shared& sh, std::uint64_t seq, Generation& g) {
    ++g.consumed;
    if (g.consumed == sh.n) sh.generations.erase(seq);
  }

  void count_gather(const Generation& g, PayloadKind kind, Phase phase, std::size_t sent) {
    std::uint64_t received = 0;
    for (std::uint32_t r = 0; r < g.gather_deposits.size(); ++r) {
      if (r != rank_) received += g.gather_deposits[r].size();
    }
    bump(kind, phase, sent, received);
  }

  void bump(PayloadKind, Phase phase, std::uint64_t sent, std::uint64_t received) {
    std::lock_guard lock(stats_mu_);
    stats_.bytes_sent += sent;
    stats_.bytes_received += received;
    stats_.collective_calls += 1;
    auto& ph = stats_.phase[static_cast<std::size_t>(phase)];
    ph.bytes_sent += sent;
    ph.bytes_received += received;
    ph.calls += 1;
  }

  std::shared_ptr<LoopbackCluster::Shared> shared_;
  std::uint32_t rank_;
  std::uint64_t seq_ = 0;
  mutable std::mutex stats_mu_;
  CommStats stats_;
};

}  // namespace

LoopbackCluster::LoopbackCluster(std::uint32_t n, std::uint64_t scheduler_seed)
    : shared_(std::make_shared<Shared>()) {
  if (n == 0) throw ConfigError("loopback cluster needs at least one node");
  shared_->n = n;
  shared_->sched_seed = scheduler_seed;
  endpoints_.reserve(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    endpoints_.push_back(std::make_unique<LoopbackEndpoint>(shared_, r));
  }
}

LoopbackCluster::~LoopbackCluster() = default;

std::uint32_t LoopbackCluster::size() const { return shared_->n; }

CollectiveEndpoint& LoopbackCluster::endpoint(std::uint32_t rank) { return *endpoints_.at(rank); }

void LoopbackCluster::set_record_calls(bool enable) {
  std::lock_guard lock(shared_->mu);
  shared_->record = enable;
}

std::vector<CallRecord> LoopbackCluster::call_log() const {
  std::lock_guard lock(shared_->mu);
  return shared_->log;
}

void LoopbackCluster::poison(const std::string& why) {
  std::lock_guard lock(shared_->mu);
  shared_->poisoned = true;
  shared_->poison_msg = "cluster aborted: " + why;
  shared_->cv.notify_all();
}

}  // namespace hashmesh::transport
