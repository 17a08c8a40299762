#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hashmesh/layer.hpp"

namespace hashmesh::transport {

// Accounting phases for the per-batch collectives.
enum class Phase : std::uint8_t {
  kForwardGather = 0,
  kErrorSync = 1,
  kGradReduce = 2,
  kControl = 3,
};
inline constexpr std::size_t kNumPhases = 4;
const char* phase_name(Phase p);

// Payload type tags. The training engine only ever sends activations,
// errors, and error partials; the tag stream is auditable (weight locality).
enum class PayloadKind : std::uint8_t {
  kActivations = 0,
  kErrors = 1,
  kErrorPartials = 2,
  kWeights = 3,
  kRaw = 4,
  kNone = 5,  // barrier
};
const char* payload_kind_name(PayloadKind k);

struct PhaseStats {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t calls = 0;
};

// Byte counters measure the *logical* payload of each collective (what the
// abstract operation moves: own contribution sent once, every peer's
// contribution received once), independent of how a transport routes it.
// Loopback and TCP therefore report identical numbers for identical call
// sequences.
struct CommStats {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t collective_calls = 0;
  PhaseStats phase[kNumPhases];

  std::string to_json_string() const;
  CommStats& operator+=(const CommStats& o);
};

// One handle per node. Collectives are synchronous and act as critical
// sections: an endpoint must never have two collectives in flight (callers
// serialize, matching the one-rank-per-node model).
class CollectiveEndpoint {
 public:
  virtual ~CollectiveEndpoint() = default;

  virtual std::uint32_t node_id() const = 0;
  virtual std::uint32_t world_size() const = 0;

  // Every node receives every node's payload, ordered by rank.
  virtual std::vector<std::vector<std::byte>> all_gather_var(std::span<const std::byte> local,
                                                             PayloadKind kind, Phase phase) = 0;

  // Element-wise sum in rank order (0..n-1), replicated to every node.
  virtual void all_reduce_sum(std::span<float> inout, PayloadKind kind, Phase phase) = 0;

  virtual void barrier() = 0;

  virtual CommStats stats() const = 0;
};

struct CallRecord {
  std::uint64_t seq;
  char op;  // 'G' gather, 'R' reduce, 'B' barrier
  PayloadKind kind;
  Phase phase;
  std::vector<std::uint64_t> bytes_per_rank;
};

// Deterministic in-process cluster: n endpoints sharing one rendezvous.
// Results are a pure function of the deposited payloads (reductions and
// gathers are computed once, in rank order); the scheduler seed only
// perturbs thread wakeup order for schedule-robustness tests.
class LoopbackCluster {
 public:
  explicit LoopbackCluster(std::uint32_t n, std::uint64_t scheduler_seed = 0);
  ~LoopbackCluster();

  std::uint32_t size() const;
  CollectiveEndpoint& endpoint(std::uint32_t rank);

  void set_record_calls(bool enable);
  std::vector<CallRecord> call_log() const;

  // Unblocks every pending and future collective with a TransportError;
  // used when one node fails so its peers do not wait forever.
  void poison(const std::string& why);

  struct Shared;  // rendezvous state, shared by the endpoints

 private:
  std::shared_ptr<Shared> shared_;
  std::vector<std::unique_ptr<CollectiveEndpoint>> endpoints_;
};

struct TcpTopology {
  std::uint32_t node_id = 0;
  std::vector<std::string> peers;  // host:port per rank
  int timeout_ms = 30000;
};

// Full-mesh TCP endpoint; lower ranks dial higher ranks, connections carry a
// 4-byte magic + 2-byte version handshake. Blocks until the mesh is up.
std::unique_ptr<CollectiveEndpoint> connect_tcp_mesh(const TcpTopology& topology);

// ---------------------------------------------------------------------------
// Snapshot synchronization (the per-layer gather).
//
// Wire layout, little-endian, per shard payload:
//   sparse:      per sample { u32 count, u32 ids[count], f32 values[count] }
//   dense:       per sample { u32 count, f32 values[count] }   (ids implicit:
//                the shard's contiguous range)
//   values-only: per sample { u32 count, f32 values[count] }   (ids known
//                from a previous gather; used for the error sync)
// The sample count is implied by the batch and is not transmitted.

std::vector<std::byte> encode_snapshot_partial(const LayerSnapshot& partial, bool with_ids);

// Gathers one shard's partial snapshot and merges all shards' slices per
// sample (rank ranges are contiguous and ascending, so merged ids stay
// sorted). `ranges` gives every rank's neuron range; dense = dense wire
// layout (ids reconstructed from ranges).
LayerSnapshot snapshot_sync(CollectiveEndpoint& ep, const LayerSnapshot& partial,
                            std::span<const ShardRange> ranges, bool dense, Phase phase);

// Gathers every shard's error slice into `gathered` (which already holds the
// ids from the forward gather). `local_errs` is this node's slice, one span
// per sample.
void error_sync(CollectiveEndpoint& ep, LayerSnapshot& gathered,
                const LayerSnapshot& local_partial);

}  // namespace hashmesh::transport
