#pragma once

// Scripted collective sequences for transport conformance: the same seed
// must produce identical outputs and identical logical byte counters on any
// CollectiveEndpoint implementation.

#include <cstring>
#include <vector>

#include "hashmesh/common.hpp"
#include "hashmesh/transport.hpp"

namespace conformance {

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// Runs `calls` scripted collectives and digests every result. All ranks of a
// given cluster return the same digest; loopback and TCP clusters running
// the same script must agree on digest and per-rank stats.
inline std::uint64_t run_script(hashmesh::transport::CollectiveEndpoint& ep, std::uint64_t seed,
                                int calls) {
  using namespace hashmesh;
  using namespace hashmesh::transport;
  const std::uint32_t n = ep.world_size();
  std::uint64_t digest = 1469598103934665603ULL;
  for (int c = 0; c < calls; ++c) {
    const std::uint64_t pick = mix64(derive_seed({seed, static_cast<std::uint64_t>(c)})) % 3;
    if (pick == 0) {
      std::vector<std::byte> payload(
          derive_seed({seed, static_cast<std::uint64_t>(c), ep.node_id(), 1}) % 257);
      for (std::size_t i = 0; i < payload.size(); ++i) {
        payload[i] = static_cast<std::byte>(
            derive_seed({seed, static_cast<std::uint64_t>(c), ep.node_id(), i}) & 0xff);
      }
      const auto gathered =
          ep.all_gather_var(payload, PayloadKind::kRaw, Phase::kForwardGather);
      for (std::uint32_t r = 0; r < n; ++r) {
        digest = fnv1a(gathered[r].data(), gathered[r].size(), digest);
      }
    } else if (pick == 1) {
      const std::size_t len = derive_seed({seed, static_cast<std::uint64_t>(c), 7}) % 129;
      std::vector<float> v(len);
      for (std::size_t i = 0; i < len; ++i) {
        v[i] = static_cast<float>(
                   static_cast<std::int64_t>(
                       derive_seed({seed, static_cast<std::uint64_t>(c), ep.node_id(), i}) %
                       2001) -
                   1000) /
               64.0f;
      }
      ep.all_reduce_sum(v, PayloadKind::kRaw, Phase::kGradReduce);
      digest = fnv1a(v.data(), v.size() * sizeof(float), digest);
    } else {
      ep.barrier();
      digest = fnv1a("B", 1, digest);
    }
  }
  return digest;
}

inline std::uint64_t stats_digest(const hashmesh::transport::CommStats& s) {
  std::uint64_t h = fnv1a(&s.bytes_sent, sizeof(s.bytes_sent));
  h = fnv1a(&s.bytes_received, sizeof(s.bytes_received), h);
  h = fnv1a(&s.collective_calls, sizeof(s.collective_calls), h);
  for (std::size_t p = 0; p < hashmesh::transport::kNumPhases; ++p) {
    h = fnv1a(&s.phase[p], sizeof(s.phase[p]), h);
  }
  return h;
}

}  // namespace conformance
