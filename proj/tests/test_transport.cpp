#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <future>
#include <numeric>

#include "conformance.hpp"
#include "hashmesh/transport.hpp"

using namespace hashmesh;
using namespace hashmesh::transport;

namespace {

std::vector<std::byte> bytes_of(std::initializer_list<int> vals) {
  std::vector<std::byte> out;
  for (int v : vals) out.push_back(static_cast<std::byte>(v));
  return out;
}

// Runs fn(rank, endpoint) on every rank of a fresh loopback cluster and
// rethrows the first failure.
template <typename Fn>
void on_cluster(std::uint32_t n, Fn&& fn, std::uint64_t sched_seed = 0) {
  LoopbackCluster cluster(n, sched_seed);
  std::vector<std::future<void>> futures;
  for (std::uint32_t r = 0; r < n; ++r) {
    futures.push_back(std::async(std::launch::async,
                                 [&, r] { fn(r, cluster.endpoint(r)); }));
  }
  std::exception_ptr first;
  for (auto& f : futures) {
    try {
      f.get();
    } catch (...) {
      if (!first) first = std::current_exception();
    }
  }
  if (first) std::rethrow_exception(first);
}

std::uint16_t pick_free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  socklen_t len = sizeof(addr);
  REQUIRE(::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace

TEST_CASE("all_gather_var: identity at n=1") {
  LoopbackCluster cluster(1);
  auto& ep = cluster.endpoint(0);
  const auto payload = bytes_of({42});
  const auto out = ep.all_gather_var(payload, PayloadKind::kRaw, Phase::kForwardGather);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == payload);
}

TEST_CASE("all_gather_var: both nodes receive both payloads in rank order") {
  std::vector<std::vector<std::vector<std::byte>>> results(2);
  on_cluster(2, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    const auto mine = r == 0 ? bytes_of({1}) : bytes_of({2, 3});
    results[r] = ep.all_gather_var(mine, PayloadKind::kRaw, Phase::kForwardGather);
  });
  for (const auto& got : results) {
    REQUIRE(got.size() == 2);
    CHECK(got[0] == bytes_of({1}));
    CHECK(got[1] == bytes_of({2, 3}));
  }
}

TEST_CASE("all_gather_var: 3-node variable lengths match the concatenation oracle") {
  const std::vector<std::vector<std::byte>> payloads{
      bytes_of({1, 2, 3, 4}), bytes_of({5, 6}), bytes_of({7, 8, 9})};
  std::vector<std::vector<std::vector<std::byte>>> results(3);
  on_cluster(3, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    results[r] = ep.all_gather_var(payloads[r], PayloadKind::kRaw, Phase::kForwardGather);
  });
  // Single-process oracle: the gather of rank-ordered payloads IS the list.
  for (std::uint32_t r = 0; r < 3; ++r) {
    REQUIRE(results[r].size() == 3);
    std::vector<std::size_t> lens;
    for (const auto& p : results[r]) lens.push_back(p.size());
    CHECK(lens == std::vector<std::size_t>{4, 2, 3});
    CHECK(results[r] == payloads);
  }
}

TEST_CASE("all_reduce_sum: identity, 2-node example, 4-node bit-exact rank order") {
  LoopbackCluster single(1);
  std::vector<float> v{1.5f, -2.0f};
  single.endpoint(0).all_reduce_sum(v, PayloadKind::kRaw, Phase::kGradReduce);
  CHECK(v == std::vector<float>{1.5f, -2.0f});

  std::vector<std::vector<float>> results(2);
  on_cluster(2, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    std::vector<float> mine = r == 0 ? std::vector<float>{1, 2} : std::vector<float>{3, 4};
    ep.all_reduce_sum(mine, PayloadKind::kRaw, Phase::kGradReduce);
    results[r] = mine;
  });
  CHECK(results[0] == std::vector<float>{4, 6});
  CHECK(results[1] == std::vector<float>{4, 6});

  // 4 random vectors: result must equal the sequential rank-order sum.
  std::mt19937_64 rng(5);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::vector<std::vector<float>> inputs(4, std::vector<float>(64));
  for (auto& v4 : inputs) {
    for (auto& x : v4) x = unit(rng);
  }
  std::vector<float> want = inputs[0];
  for (std::uint32_t r = 1; r < 4; ++r) {
    for (std::size_t i = 0; i < want.size(); ++i) want[i] += inputs[r][i];
  }
  std::vector<std::vector<float>> out4(4);
  on_cluster(4, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    std::vector<float> mine = inputs[r];
    ep.all_reduce_sum(mine, PayloadKind::kRaw, Phase::kGradReduce);
    out4[r] = mine;
  });
  for (std::uint32_t r = 0; r < 4; ++r) {
    CHECK(std::memcmp(out4[r].data(), want.data(), want.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("all_reduce_sum: length mismatch raises a protocol error") {
  CHECK_THROWS_WITH_AS(
      on_cluster(2,
                 [&](std::uint32_t r, CollectiveEndpoint& ep) {
                   std::vector<float> mine(r == 0 ? 3 : 5, 1.0f);
                   ep.all_reduce_sum(mine, PayloadKind::kRaw, Phase::kGradReduce);
                 }),
      doctest::Contains("supplied length"), ProtocolError);
}

TEST_CASE("mismatched ops at one sequence number raise a protocol error") {
  CHECK_THROWS_AS(on_cluster(2,
                             [&](std::uint32_t r, CollectiveEndpoint& ep) {
                               if (r == 0) {
                                 ep.barrier();
                               } else {
                                 std::vector<float> v(2, 0.0f);
                                 ep.all_reduce_sum(v, PayloadKind::kRaw, Phase::kGradReduce);
                               }
                             }),
                  ProtocolError);
}

TEST_CASE("barrier: immediate at n=1, releases only when all entered") {
  LoopbackCluster single(1);
  single.endpoint(0).barrier();  // returns

  std::atomic<int> entered{0};
  std::vector<int> seen_at_exit(3, 0);
  on_cluster(3, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    if (r == 1) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    if (r == 2) std::this_thread::sleep_for(std::chrono::milliseconds(40));
    entered.fetch_add(1);
    ep.barrier();
    seen_at_exit[r] = entered.load();
  });
  for (int v : seen_at_exit) CHECK(v == 3);
}

TEST_CASE("consecutive barrier generations never cross-release") {
  for (std::uint64_t sched_seed : {0ull, 17ull, 91ull}) {
    std::atomic<int> gen0{0}, gen1{0};
    std::vector<int> snap0(3, 0), snap1(3, 0);
    on_cluster(
        3,
        [&](std::uint32_t r, CollectiveEndpoint& ep) {
          if (r == 2) std::this_thread::sleep_for(std::chrono::milliseconds(10));
          gen0.fetch_add(1);
          ep.barrier();
          snap0[r] = gen0.load();
          if (r == 0) std::this_thread::sleep_for(std::chrono::milliseconds(10));
          gen1.fetch_add(1);
          ep.barrier();
          snap1[r] = gen1.load();
        },
        sched_seed);
    for (int v : snap0) CHECK(v == 3);
    for (int v : snap1) CHECK(v == 3);
  }
}

namespace {

LayerSnapshot partial_with_counts(std::uint32_t width, std::uint32_t shard_begin,
                                  const std::vector<std::uint32_t>& counts, float base) {
  LayerSnapshot snap;
  snap.width = width;
  snap.num_shards = 1;
  snap.offsets.assign(counts.size() + 1, 0);
  for (std::size_t s = 0; s < counts.size(); ++s) {
    snap.offsets[s + 1] = snap.offsets[s] + counts[s];
  }
  snap.shard_counts = counts;
  const std::uint32_t total = snap.offsets.back();
  snap.ids.resize(total);
  snap.acts.resize(total);
  snap.errs.assign(total, 0.0f);
  for (std::size_t s = 0; s < counts.size(); ++s) {
    for (std::uint32_t i = 0; i < counts[s]; ++i) {
      snap.ids[snap.offsets[s] + i] = shard_begin + i;
      snap.acts[snap.offsets[s] + i] = base + static_cast<float>(s) + 0.01f * i;
    }
  }
  return snap;
}

}  // namespace

TEST_CASE("snapshot_sync: n=1 gathered equals local") {
  LoopbackCluster cluster(1);
  const auto partial = partial_with_counts(10, 0, {3, 2}, 1.0f);
  const ShardRange ranges[1] = {{0, 10}};
  const auto merged = snapshot_sync(cluster.endpoint(0), partial, ranges, false,
                                    Phase::kForwardGather);
  merged.check_well_formed();
  CHECK(merged.ids == partial.ids);
  CHECK(merged.acts == partial.acts);
  CHECK(merged.shard_counts == partial.shard_counts);
}

TEST_CASE("snapshot_sync: two shards merge with per-shard counts recorded") {
  // Sample active counts (3, 5) across two shards: merged sample holds 8
  // entries and counts [3, 5].
  std::vector<LayerSnapshot> merged(2);
  const ShardRange ranges[2] = {{0, 8}, {8, 16}};
  on_cluster(2, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    const auto partial = partial_with_counts(16, r == 0 ? 0 : 8, {r == 0 ? 3u : 5u}, r * 10.0f);
    merged[r] = snapshot_sync(ep, partial, ranges, false, Phase::kForwardGather);
  });
  for (const auto& m : merged) {
    m.check_well_formed();
    CHECK(m.count_of(0) == 8);
    CHECK(m.shard_counts == std::vector<std::uint32_t>{3, 5});
    CHECK(m.ids_of(0)[3] == 8);  // shard 1's slice follows shard 0's
  }
  CHECK(merged[0].ids == merged[1].ids);
  CHECK(merged[0].acts == merged[1].acts);
}

TEST_CASE("snapshot_sync: frozen byte accounting (B=16, budget 32, n=2)") {
  // Per sample per shard: 4-byte count header + 32 * 8 bytes = 260 bytes;
  // cluster-wide forward payload = 2 * 16 * 260 = 8320 bytes.
  std::vector<CommStats> stats(2);
  const ShardRange ranges[2] = {{0, 64}, {64, 128}};
  on_cluster(2, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    const auto partial = partial_with_counts(128, r == 0 ? 0 : 64,
                                             std::vector<std::uint32_t>(16, 32), 0.5f);
    snapshot_sync(ep, partial, ranges, false, Phase::kForwardGather);
    stats[r] = ep.stats();
  });
  const auto& fg0 = stats[0].phase[static_cast<std::size_t>(Phase::kForwardGather)];
  const auto& fg1 = stats[1].phase[static_cast<std::size_t>(Phase::kForwardGather)];
  CHECK(fg0.bytes_sent == 4160);
  CHECK(fg1.bytes_sent == 4160);
  CHECK(fg0.bytes_sent + fg1.bytes_sent == 8320);
  CHECK(fg0.bytes_received == 4160);  // the peer's payload
  CHECK(fg0.calls == 1);
}

TEST_CASE("error_sync fills every shard's slice; count mismatch is a protocol error") {
  const ShardRange ranges[2] = {{0, 8}, {8, 16}};
  std::vector<LayerSnapshot> merged(2);
  on_cluster(2, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    auto partial = partial_with_counts(16, r == 0 ? 0 : 8, {2, 2}, 1.0f);
    auto gathered = snapshot_sync(ep, partial, ranges, false, Phase::kForwardGather);
    for (auto& e : partial.errs) e = static_cast<float>(r + 1);
    error_sync(ep, gathered, partial);
    merged[r] = std::move(gathered);
  });
  for (const auto& m : merged) {
    CHECK(m.errs_of(0)[0] == 1.0f);  // shard 0 slice
    CHECK(m.errs_of(0)[2] == 2.0f);  // shard 1 slice
  }
}

TEST_CASE("loopback determinism: same scheduler seed, bit-identical script results") {
  auto run_once = [&](std::uint64_t sched) {
    std::vector<std::uint64_t> digests(3);
    std::vector<std::uint64_t> stat_digests(3);
    on_cluster(
        3,
        [&](std::uint32_t r, CollectiveEndpoint& ep) {
          digests[r] = conformance::run_script(ep, 2024, 20);
          stat_digests[r] = conformance::stats_digest(ep.stats());
        },
        sched);
    CHECK(digests[0] == digests[1]);
    CHECK(digests[0] == digests[2]);
    return std::make_pair(digests[0], stat_digests);
  };
  const auto [d1, s1] = run_once(42);
  const auto [d2, s2] = run_once(42);
  CHECK(d1 == d2);
  CHECK(s1 == s2);
  // A different schedule perturbation cannot change results either.
  const auto [d3, s3] = run_once(43);
  CHECK(d1 == d3);
  CHECK(s1 == s3);
}

TEST_CASE("call log records op, payload kind, and per-rank bytes") {
  LoopbackCluster cluster(2);
  cluster.set_record_calls(true);
  std::vector<std::future<void>> futures;
  for (std::uint32_t r = 0; r < 2; ++r) {
    futures.push_back(std::async(std::launch::async, [&, r] {
      auto& ep = cluster.endpoint(r);
      ep.all_gather_var(bytes_of({1, 2}), PayloadKind::kActivations, Phase::kForwardGather);
      std::vector<float> v(4, 1.0f);
      ep.all_reduce_sum(v, PayloadKind::kErrorPartials, Phase::kGradReduce);
      ep.barrier();
    }));
  }
  for (auto& f : futures) f.get();
  const auto log = cluster.call_log();
  REQUIRE(log.size() == 3);
  CHECK(log[0].op == 'G');
  CHECK(log[0].kind == PayloadKind::kActivations);
  CHECK(log[0].bytes_per_rank == std::vector<std::uint64_t>{2, 2});
  CHECK(log[1].op == 'R');
  CHECK(log[1].kind == PayloadKind::kErrorPartials);
  CHECK(log[2].op == 'B');
}

// ---------------------------------------------------------------------------
// TCP mesh (in-process: one endpoint per thread)

namespace {

std::vector<std::string> local_peers(std::uint32_t n) {
  std::vector<std::string> peers;
  for (std::uint32_t r = 0; r < n; ++r) {
    peers.push_back("127.0.0.1:" + std::to_string(pick_free_port()));
  }
  return peers;
}

}  // namespace

TEST_CASE("tcp mesh matches loopback on a recorded script (3 nodes, in-process)") {
  const std::uint32_t n = 3;
  // Loopback reference.
  std::vector<std::uint64_t> loop_digest(n), loop_stats(n);
  on_cluster(n, [&](std::uint32_t r, CollectiveEndpoint& ep) {
    loop_digest[r] = conformance::run_script(ep, 99, 15);
    loop_stats[r] = conformance::stats_digest(ep.stats());
  });

  const auto peers = local_peers(n);
  std::vector<std::uint64_t> tcp_digest(n), tcp_stats(n);
  std::vector<std::future<void>> futures;
  for (std::uint32_t r = 0; r < n; ++r) {
    futures.push_back(std::async(std::launch::async, [&, r] {
      TcpTopology topo;
      topo.node_id = r;
      topo.peers = peers;
      topo.timeout_ms = 10000;
      auto ep = connect_tcp_mesh(topo);
      tcp_digest[r] = conformance::run_script(*ep, 99, 15);
      tcp_stats[r] = conformance::stats_digest(ep->stats());
    }));
  }
  for (auto& f : futures) f.get();
  for (std::uint32_t r = 0; r < n; ++r) {
    CHECK(tcp_digest[r] == loop_digest[r]);
    CHECK(tcp_stats[r] == loop_stats[r]);
  }
}

TEST_CASE("tcp: connect timeout names the unreachable rank") {
  TcpTopology topo;
  topo.node_id = 0;
  topo.peers = {"127.0.0.1:1", "127.0.0.1:" + std::to_string(pick_free_port())};
  topo.timeout_ms = 300;
  CHECK_THROWS_WITH_AS(connect_tcp_mesh(topo), doctest::Contains("rank 1"), TransportError);
}

TEST_CASE("tcp: a bad handshake magic is rejected") {
  const auto peers = local_peers(2);
  auto listener = std::async(std::launch::async, [&] {
    TcpTopology topo;
    topo.node_id = 1;  // highest rank: accepts from rank 0
    topo.peers = peers;
    topo.timeout_ms = 3000;
    connect_tcp_mesh(topo);
  });
  // Dial rank 1 directly and speak garbage.
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(
      std::stoi(peers[1].substr(peers[1].rfind(':') + 1))));
  for (int tries = 0; tries < 50; ++tries) {
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  const char garbage[10] = {'X', 'X', 'X', 'X', 0, 0, 0, 0, 0, 0};
  (void)!::send(fd, garbage, sizeof(garbage), MSG_NOSIGNAL);
  CHECK_THROWS_AS(listener.get(), ProtocolError);
  ::close(fd);
}
