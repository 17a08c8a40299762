#include <bit>
#include <cstring>

#include "hashmesh/common.hpp"
#include "hashmesh/transport.hpp"

namespace hashmesh::transport {

namespace {

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  std::byte b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

void put_f32(std::vector<std::byte>& out, std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::byte*>(v.data());
  out.insert(out.end(), p, p + v.size() * sizeof(float));
}

struct Reader {
  const std::byte* p;
  const std::byte* end;
  std::uint32_t rank;

  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }
  void f32_into(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, p, n * sizeof(float));
    p += n * sizeof(float);
  }
  void u32_into(std::uint32_t* dst, std::size_t n) {
    need(n * sizeof(std::uint32_t));
    std::memcpy(dst, p, n * sizeof(std::uint32_t));
    p += n * sizeof(std::uint32_t);
  }
  void need(std::size_t n) {
    if (static_cast<std::size_t>(end - p) < n) {
      throw ProtocolError("snapshot payload from rank " + std::to_string(rank) + " truncated");
    }
  }
  bool done() const { return p == end; }
};

static_assert(std::endian::native == std::endian::little,
              "wire format assumes a little-endian host");

}  // namespace

std::vector<std::byte> encode_snapshot_partial(const LayerSnapshot& partial, bool with_ids) {
  std::vector<std::byte> out;
  const std::uint32_t batch = partial.batch();
  out.reserve(4ull * batch + partial.acts.size() * (with_ids ? 8 : 4));
  for (std::uint32_t s = 0; s < batch; ++s) {
    const std::uint32_t count = partial.count_of(s);
    put_u32(out, count);
    if (with_ids) {
      const auto* p = reinterpret_cast<const std::byte*>(partial.ids.data() + partial.offsets[s]);
      out.insert(out.end(), p, p + count * sizeof(std::uint32_t));
    }
    put_f32(out, partial.acts_of(s));
  }
  return out;
}

LayerSnapshot snapshot_sync(CollectiveEndpoint& ep, const LayerSnapshot& partial,
                            std::span<const ShardRange> ranges, bool dense, Phase phase) {
  const std::uint32_t n = ep.world_size();
  const std::uint32_t batch = partial.batch();
  const auto payload = encode_snapshot_partial(partial, /*with_ids=*/!dense);
  auto gathered = ep.all_gather_var(payload, PayloadKind::kActivations, phase);

  LayerSnapshot merged;
  merged.width = partial.width;
  merged.num_shards = n;
  merged.offsets.assign(batch + 1, 0);
  merged.shard_counts.assign(static_cast<std::size_t>(batch) * n, 0);

  // Pass 1: per-sample counts.
  std::vector<Reader> readers;
  readers.reserve(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    readers.push_back(Reader{gathered[r].data(), gathered[r].data() + gathered[r].size(), r});
  }
  for (std::uint32_t s = 0; s < batch; ++s) {
    std::uint32_t total = 0;
    for (std::uint32_t r = 0; r < n; ++r) {
      const std::uint32_t c = readers[r].u32();
      merged.shard_counts[static_cast<std::size_t>(s) * n + r] = c;
      total += c;
      const std::size_t skip = static_cast<std::size_t>(c) * (dense ? 4 : 8);
      readers[r].need(skip);
      readers[r].p += skip;
    }
    merged.offsets[s + 1] = merged.offsets[s] + total;
  }
  for (std::uint32_t r = 0; r < n; ++r) {
    if (!readers[r].done()) {
      throw ProtocolError("snapshot payload from rank " + std::to_string(r) +
                          " has trailing bytes");
    }
  }

  // Pass 2: fill. Rank ranges are contiguous ascending, so appending slices
  // in rank order keeps per-sample ids sorted. Dense gathers always cover
  // the full width in order, so the ids stay implicit.
  const std::size_t total = merged.offsets[batch];
  merged.implicit_full_ids = dense;
  if (!dense) merged.ids.resize(total);
  merged.acts.resize(total);
  merged.errs.assign(total, 0.0f);
  for (std::uint32_t r = 0; r < n; ++r) {
    if (dense) {
      for (std::uint32_t s = 0; s < batch; ++s) {
        const std::uint32_t c = merged.shard_counts[static_cast<std::size_t>(s) * n + r];
        if (c != ranges[r].size()) {
          throw ProtocolError("dense snapshot from rank " + std::to_string(r) +
                              " does not cover its shard");
        }
      }
    }
    readers[r] = Reader{gathered[r].data(), gathered[r].data() + gathered[r].size(), r};
  }
  for (std::uint32_t s = 0; s < batch; ++s) {
    std::size_t pos = merged.offsets[s];
    for (std::uint32_t r = 0; r < n; ++r) {
      const std::uint32_t c = readers[r].u32();
      if (!dense) readers[r].u32_into(merged.ids.data() + pos, c);
      readers[r].f32_into(merged.acts.data() + pos, c);
      pos += c;
    }
  }
  return merged;
}

void error_sync(CollectiveEndpoint& ep, LayerSnapshot& gathered,
                const LayerSnapshot& local_partial) {
  const std::uint32_t n = ep.world_size();
  const std::uint32_t batch = gathered.batch();

  std::vector<std::byte> payload;
  payload.reserve(4ull * batch + local_partial.errs.size() * sizeof(float));
  for (std::uint32_t s = 0; s < batch; ++s) {
    const auto errs = local_partial.errs_of(s);
    put_u32(payload, static_cast<std::uint32_t>(errs.size()));
    put_f32(payload, errs);
  }
  auto all = ep.all_gather_var(payload, PayloadKind::kErrors, Phase::kErrorSync);

  std::vector<Reader> readers;
  readers.reserve(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    readers.push_back(Reader{all[r].data(), all[r].data() + all[r].size(), r});
  }
  for (std::uint32_t s = 0; s < batch; ++s) {
    std::size_t pos = gathered.offsets[s];
    for (std::uint32_t r = 0; r < n; ++r) {
      const std::uint32_t c = readers[r].u32();
      if (c != gathered.shard_counts[static_cast<std::size_t>(s) * n + r]) {
        throw ProtocolError("error sync count from rank " + std::to_string(r) +
                            " does not match the forward gather");
      }
      readers[r].f32_into(gathered.errs.data() + pos, c);
      pos += c;
    }
  }
}

}  // namespace hashmesh::transport
