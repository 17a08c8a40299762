#include "hashmesh/lsh.hpp"

#include <algorithm>
#include <bit>
#include <cassert>
#include <numeric>
#include <stdexcept>

#include "hashmesh/common.hpp"
#include "hashmesh/kernels.hpp"

namespace hashmesh::lsh {

namespace {

void check_key_dim(std::uint32_t expected, std::uint32_t got) {
  if (expected != got) {
    throw std::invalid_argument("lsh: key dimension mismatch (" + std::to_string(got) +
                                " vs indexed " + std::to_string(expected) + ")");
  }
}

}  // namespace

void LshConfig::validate() const {
  if (hashes_per_table < 1) throw ConfigError("lsh.hashes_per_table must be >= 1");
  if (num_tables < 1) throw ConfigError("lsh.num_tables must be >= 1");
  if (family == Family::kDwta && dwta_bin_size < 2) {
    throw ConfigError("lsh.dwta_bin_size must be >= 2");
  }
  if (bucket_bits() > 32) {
    throw ConfigError("lsh: bucket id exceeds 32 bits (K_h=" + std::to_string(hashes_per_table) +
                      ", bits/hash=" + std::to_string(bucket_bits() / hashes_per_table) + ")");
  }
}

std::uint32_t LshConfig::bucket_bits() const {
  if (family == Family::kSrp) return hashes_per_table;
  // One extra code point (value m) is reserved for the densification
  // sentinel, hence bit_width(m) rather than bit_width(m - 1).
  return hashes_per_table * static_cast<std::uint32_t>(std::bit_width(dwta_bin_size));
}

// ---------------------------------------------------------------------------
// SRP

SrpFamily::SrpFamily(const LshConfig& cfg, std::uint32_t key_dim) : cfg_(cfg), key_dim_(key_dim) {
  cfg_.validate();
  const std::size_t per_plane = key_dim;
  planes_.resize(static_cast<std::size_t>(cfg.num_tables) * cfg.hashes_per_table * per_plane);
  for (std::uint32_t t = 0; t < cfg.num_tables; ++t) {
    for (std::uint32_t j = 0; j < cfg.hashes_per_table; ++j) {
      auto rng = derive_rng({cfg.seed, 0x535250u /* "SRP" */, t, j});
      std::uniform_int_distribution<int> die(0, 5);
      std::int8_t* row = planes_.data() + (static_cast<std::size_t>(t) * cfg.hashes_per_table + j) * per_plane;
      for (std::uint32_t c = 0; c < key_dim; ++c) {
        const int u = die(rng);
        row[c] = (u == 0) ? 1 : (u == 1) ? -1 : 0;
      }
    }
  }
}

std::span<const std::int8_t> SrpFamily::plane(std::uint32_t table, std::uint32_t j) const {
  const std::size_t off =
      (static_cast<std::size_t>(table) * cfg_.hashes_per_table + j) * key_dim_;
  return {planes_.data() + off, key_dim_};
}

std::uint32_t SrpFamily::hash_dense(std::uint32_t table, std::span<const float> key) const {
  check_key_dim(key_dim_, static_cast<std::uint32_t>(key.size()));
  const auto& k = kernels::ops();
  std::uint32_t bucket = 0;
  for (std::uint32_t j = 0; j < cfg_.hashes_per_table; ++j) {
    const float dot = k.dot_sign_i8(key.data(), plane(table, j).data(), key_dim_);
    bucket = (bucket << 1) | (dot > 0.0f ? 1u : 0u);  // sign(0) -> bit 0
  }
  return bucket;
}

std::uint32_t SrpFamily::hash_sparse(std::uint32_t table, const SparseVector& key) const {
  return hash_sparse(table, key.indices, key.values, key.dim);
}

std::uint32_t SrpFamily::hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                                     std::span<const float> val, std::uint32_t dim) const {
  check_key_dim(key_dim_, dim);
  std::uint32_t bucket = 0;
  for (std::uint32_t j = 0; j < cfg_.hashes_per_table; ++j) {
    const std::int8_t* row = plane(table, j).data();
    float dot = 0.0f;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      dot += val[i] * static_cast<float>(row[idx[i]]);
    }
    bucket = (bucket << 1) | (dot > 0.0f ? 1u : 0u);
  }
  return bucket;
}

// ---------------------------------------------------------------------------
// DWTA

DwtaFamily::DwtaFamily(const LshConfig& cfg, std::uint32_t key_dim)
    : cfg_(cfg), key_dim_(key_dim) {
  cfg_.validate();
  const std::uint32_t m = cfg.dwta_bin_size;
  if (m > key_dim) {
    throw ConfigError("lsh.dwta_bin_size exceeds key dimension " + std::to_string(key_dim));
  }
  code_bits_ = static_cast<std::uint32_t>(std::bit_width(m));
  windows_.resize(static_cast<std::size_t>(cfg.num_tables) * cfg.hashes_per_table * m);
  std::vector<std::uint32_t> pool(key_dim);
  for (std::uint32_t t = 0; t < cfg.num_tables; ++t) {
    for (std::uint32_t j = 0; j < cfg.hashes_per_table; ++j) {
      auto rng = derive_rng({cfg.seed, 0x44575441u /* "DWTA" */, t, j});
      std::iota(pool.begin(), pool.end(), 0u);
      std::uint32_t* w =
          windows_.data() + (static_cast<std::size_t>(t) * cfg.hashes_per_table + j) * m;
      // Partial Fisher-Yates: m distinct coordinates per window.
      for (std::uint32_t p = 0; p < m; ++p) {
        std::uniform_int_distribution<std::uint32_t> pick(p, key_dim - 1);
        std::swap(pool[p], pool[pick(rng)]);
        w[p] = pool[p];
      }
    }
  }

  // Reverse index (coord -> window slots) for the batched sparse query path.
  rev_offsets_.assign(static_cast<std::size_t>(key_dim) + 1, 0);
  for (std::uint32_t c : windows_) ++rev_offsets_[c + 1];
  for (std::uint32_t c = 0; c < key_dim; ++c) rev_offsets_[c + 1] += rev_offsets_[c];
  rev_slots_.resize(windows_.size());
  std::vector<std::uint32_t> cursor(rev_offsets_.begin(), rev_offsets_.end() - 1);
  for (std::uint32_t slot = 0; slot < windows_.size(); ++slot) {
    rev_slots_[cursor[windows_[slot]]++] = slot;
  }
}

std::span<const std::uint32_t> DwtaFamily::window(std::uint32_t table, std::uint32_t j) const {
  const std::size_t off =
      (static_cast<std::size_t>(table) * cfg_.hashes_per_table + j) * cfg_.dwta_bin_size;
  return {windows_.data() + off, cfg_.dwta_bin_size};
}

template <typename Fn>
std::optional<std::uint32_t> DwtaFamily::window_code(std::uint32_t g, Fn&& value_at) const {
  const std::uint32_t m = cfg_.dwta_bin_size;
  const std::uint32_t* w = windows_.data() + static_cast<std::size_t>(g) * m;
  // Absent coordinates count as 0; ties keep the lowest position.
  float best = 0.0f;
  std::uint32_t best_pos = 0;
  bool any_nonzero = false;
  for (std::uint32_t p = 0; p < m; ++p) {
    const float v = value_at(w[p]);
    if (v != 0.0f) any_nonzero = true;
    if (v > best) {
      best = v;
      best_pos = p;
    }
  }
  if (!any_nonzero) return std::nullopt;
  return best_pos;
}

template <typename Fn>
std::uint32_t DwtaFamily::hash_impl(std::uint32_t table, Fn&& value_at) const {
  const std::uint32_t funcs = cfg_.num_tables * cfg_.hashes_per_table;
  std::uint32_t bucket = 0;
  for (std::uint32_t j = 0; j < cfg_.hashes_per_table; ++j) {
    const std::uint32_t g0 = table * cfg_.hashes_per_table + j;
    std::uint32_t code = cfg_.dwta_bin_size;  // sentinel
    for (std::uint32_t probe = 0; probe < funcs; ++probe) {
      if (auto c = window_code((g0 + probe) % funcs, value_at)) {
        code = *c;
        break;
      }
    }
    bucket = (bucket << code_bits_) | code;
  }
  return bucket;
}

std::uint32_t DwtaFamily::hash_dense(std::uint32_t table, std::span<const float> key) const {
  check_key_dim(key_dim_, static_cast<std::uint32_t>(key.size()));
  return hash_impl(table, [&](std::uint32_t c) { return key[c]; });
}

std::uint32_t DwtaFamily::hash_sparse(std::uint32_t table, const SparseVector& key) const {
  return hash_sparse(table, key.indices, key.values, key.dim);
}

std::uint32_t DwtaFamily::hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                                      std::span<const float> val, std::uint32_t dim) const {
  check_key_dim(key_dim_, dim);
  return hash_impl(table, [&](std::uint32_t c) -> float {
    const auto it = std::lower_bound(idx.begin(), idx.end(), c);
    if (it == idx.end() || *it != c) return 0.0f;
    return val[static_cast<std::size_t>(it - idx.begin())];
  });
}

namespace {

// Per-thread winner state for the batched DWTA query, stamped to avoid
// clearing between queries.
struct DwtaScratch {
  std::vector<std::uint32_t> stamp;
  std::vector<float> best;
  std::vector<std::uint32_t> best_pos;
  std::uint32_t generation = 0;
};

thread_local DwtaScratch g_dwta_scratch;

}  // namespace

void DwtaFamily::hash_all_sparse(std::span<const std::uint32_t> idx, std::span<const float> val,
                                 std::uint32_t dim, std::span<std::uint32_t> out_buckets) const {
  check_key_dim(key_dim_, dim);
  const std::uint32_t m = cfg_.dwta_bin_size;
  const std::uint32_t funcs = cfg_.num_tables * cfg_.hashes_per_table;
  auto& scratch = g_dwta_scratch;
  if (scratch.stamp.size() < funcs) {
    scratch.stamp.assign(funcs, 0);
    scratch.best.resize(funcs);
    scratch.best_pos.resize(funcs);
    scratch.generation = 0;
  }
  const std::uint32_t gen = ++scratch.generation;

  // Winner per window over the key's support only. Zero-valued entries do
  // not mark the window (absent and zero coordinates are equivalent); the
  // baseline winner is value 0 at position 0, matching the dense scan.
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const float v = val[i];
    if (v == 0.0f) continue;
    const std::uint32_t c = idx[i];
    for (std::uint32_t e = rev_offsets_[c]; e < rev_offsets_[c + 1]; ++e) {
      const std::uint32_t slot = rev_slots_[e];
      const std::uint32_t g = slot / m;
      const std::uint32_t p = slot % m;
      if (scratch.stamp[g] != gen) {
        scratch.stamp[g] = gen;
        scratch.best[g] = 0.0f;
        scratch.best_pos[g] = 0;
      }
      if (v > scratch.best[g] || (v == scratch.best[g] && p < scratch.best_pos[g])) {
        scratch.best[g] = v;
        scratch.best_pos[g] = p;
      }
    }
  }

  for (std::uint32_t t = 0; t < cfg_.num_tables; ++t) {
    std::uint32_t bucket = 0;
    for (std::uint32_t j = 0; j < cfg_.hashes_per_table; ++j) {
      const std::uint32_t g0 = t * cfg_.hashes_per_table + j;
      std::uint32_t code = m;  // sentinel
      for (std::uint32_t probe = 0; probe < funcs; ++probe) {
        const std::uint32_t g = (g0 + probe) % funcs;
        if (scratch.stamp[g] == gen) {
          code = scratch.best_pos[g];
          break;
        }
      }
      bucket = (bucket << code_bits_) | code;
    }
    out_buckets[t] = bucket;
  }
}

// ---------------------------------------------------------------------------
// HashFamily

std::shared_ptr<const HashFamily> HashFamily::create(const LshConfig& cfg, std::uint32_t key_dim) {
  std::variant<SrpFamily, DwtaFamily> impl =
      (cfg.family == Family::kSrp)
          ? std::variant<SrpFamily, DwtaFamily>(std::in_place_type<SrpFamily>, cfg, key_dim)
          : std::variant<SrpFamily, DwtaFamily>(std::in_place_type<DwtaFamily>, cfg, key_dim);
  return std::shared_ptr<const HashFamily>(new HashFamily(std::move(impl)));
}

std::uint32_t HashFamily::hash_dense(std::uint32_t table, std::span<const float> key) const {
  return std::visit([&](const auto& f) { return f.hash_dense(table, key); }, impl_);
}

std::uint32_t HashFamily::hash_sparse(std::uint32_t table, const SparseVector& key) const {
  return std::visit([&](const auto& f) { return f.hash_sparse(table, key); }, impl_);
}

std::uint32_t HashFamily::hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                                      std::span<const float> val, std::uint32_t dim) const {
  return std::visit([&](const auto& f) { return f.hash_sparse(table, idx, val, dim); }, impl_);
}

void HashFamily::hash_all_sparse(std::span<const std::uint32_t> idx, std::span<const float> val,
                                 std::uint32_t dim, std::span<std::uint32_t> out_buckets) const {
  if (const auto* dwta = std::get_if<DwtaFamily>(&impl_)) {
    dwta->hash_all_sparse(idx, val, dim, out_buckets);
    return;
  }
  const auto& srp = std::get<SrpFamily>(impl_);
  for (std::uint32_t t = 0; t < srp.config().num_tables; ++t) {
    out_buckets[t] = srp.hash_sparse(t, idx, val, dim);
  }
}

const LshConfig& HashFamily::config() const {
  return std::visit([](const auto& f) -> const LshConfig& { return f.config(); }, impl_);
}

std::uint32_t HashFamily::key_dim() const {
  return std::visit([](const auto& f) { return f.key_dim(); }, impl_);
}

std::uint32_t srp_hash(const SrpFamily& family, std::uint32_t table, const SparseVector& key) {
  return family.hash_sparse(table, key);
}

std::uint32_t dwta_hash(const DwtaFamily& family, std::uint32_t table, const SparseVector& key) {
  return family.hash_sparse(table, key);
}

// ---------------------------------------------------------------------------
// Index

void SelectionPolicy::validate() const {
  if (budget < 1) throw ConfigError("selection budget must be >= 1");
}

std::span<const std::uint32_t> LshIndex::bucket(std::uint32_t table,
                                                std::uint32_t bucket_id) const {
  const auto& tbl = tables_[table];
  const auto it = tbl.find(bucket_id);
  if (it == tbl.end()) return {};
  return it->second;
}

LshIndex::TableStats LshIndex::table_stats(std::uint32_t table) const {
  TableStats s{};
  s.code_space = std::uint64_t{1} << family_->config().bucket_bits();
  s.nonempty_buckets = static_cast<std::uint32_t>(tables_[table].size());
  s.max_bucket = 0;
  for (const auto& [id, members] : tables_[table]) {
    const auto sz = static_cast<std::uint32_t>(members.size());
    s.max_bucket = std::max(s.max_bucket, sz);
    ++s.size_histogram[sz];
  }
  s.empty_fraction =
      1.0 - static_cast<double>(s.nonempty_buckets) / static_cast<double>(s.code_space);
  return s;
}

LshIndex build_index(std::shared_ptr<const HashFamily> family, const float* weights,
                     std::size_t stride, std::uint32_t local_count, std::uint32_t owner_shard) {
  LshIndex index;
  index.family_ = std::move(family);
  index.local_count_ = local_count;
  index.owner_shard_ = owner_shard;
  const std::uint32_t tables = index.family_->config().num_tables;
  const std::uint32_t dim = index.family_->key_dim();
  index.tables_.resize(tables);
  for (std::uint32_t t = 0; t < tables; ++t) {
    for (std::uint32_t j = 0; j < local_count; ++j) {
      const std::span<const float> row{weights + static_cast<std::size_t>(j) * stride, dim};
      index.tables_[t][index.family_->hash_dense(t, row)].push_back(j);
    }
  }
  return index;
}

LshIndex rebuild(const LshIndex& index, const float* weights, std::size_t stride,
                 std::optional<std::uint64_t> new_seed) {
  std::shared_ptr<const HashFamily> family = index.family_ptr();
  if (new_seed) {
    LshConfig cfg = family->config();
    cfg.seed = *new_seed;
    family = HashFamily::create(cfg, family->key_dim());
  }
  return build_index(std::move(family), weights, stride, index.local_count(),
                     index.owner_shard());
}

// ---------------------------------------------------------------------------
// Selection

std::vector<std::uint32_t> reservoir_sample(std::span<const std::uint32_t> stream, std::size_t k,
                                            std::mt19937_64& rng) {
  std::vector<std::uint32_t> reservoir;
  if (k == 0) return reservoir;
  reservoir.assign(stream.begin(), stream.begin() + std::min(k, stream.size()));
  for (std::size_t i = k; i < stream.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    const std::size_t j = pick(rng);
    if (j < k) reservoir[j] = stream[i];
  }
  return reservoir;
}

namespace {

// Per-thread scratch: selection runs per (sample, layer) inside worker
// threads; the mark array is restored to all-zero before returning.
struct SelectScratch {
  std::vector<std::uint8_t> mark;
  std::vector<std::uint32_t> candidates;
  std::vector<std::uint32_t> buckets;
};

thread_local SelectScratch g_scratch;

}  // namespace

std::vector<std::uint32_t> select_active(const LshIndex& index, const SparseVector& query,
                                         const SelectionPolicy& policy, std::mt19937_64& rng,
                                         std::span<const std::uint32_t> forced_local) {
  return select_active(index, query.indices, query.values, query.dim, policy, rng, forced_local);
}

std::vector<std::uint32_t> select_active(const LshIndex& index,
                                         std::span<const std::uint32_t> query_idx,
                                         std::span<const float> query_val, std::uint32_t dim,
                                         const SelectionPolicy& policy, std::mt19937_64& rng,
                                         std::span<const std::uint32_t> forced_local) {
  const std::uint32_t shard_size = index.local_count();
  auto& scratch = g_scratch;
  if (scratch.mark.size() < shard_size) scratch.mark.assign(shard_size, 0);
  scratch.candidates.clear();

  std::vector<std::uint32_t> selected;
  selected.reserve(std::min<std::size_t>(policy.budget, shard_size) + forced_local.size());
  for (std::uint32_t f : forced_local) {
    assert(f < shard_size);
    if (!scratch.mark[f]) {
      scratch.mark[f] = 1;
      selected.push_back(f);
    }
  }

  // Candidate stream: union of matching buckets, tables in order, first
  // occurrence kept. Forced ids are excluded (already selected).
  const std::uint32_t tables = index.num_tables();
  scratch.buckets.resize(tables);
  index.family().hash_all_sparse(query_idx, query_val, dim, scratch.buckets);
  for (std::uint32_t t = 0; t < tables; ++t) {
    for (std::uint32_t id : index.bucket(t, scratch.buckets[t])) {
      if (!scratch.mark[id]) {
        scratch.mark[id] = 1;
        scratch.candidates.push_back(id);
      }
    }
  }

  const std::size_t cap = std::min<std::size_t>(policy.budget, shard_size);
  const std::size_t remaining = cap > selected.size() ? cap - selected.size() : 0;

  if (scratch.candidates.size() > remaining) {
    auto kept = reservoir_sample(scratch.candidates, remaining, rng);
    selected.insert(selected.end(), kept.begin(), kept.end());
  } else {
    selected.insert(selected.end(), scratch.candidates.begin(), scratch.candidates.end());
    if (policy.fill == FillPolicy::kUniformFill && selected.size() < cap) {
      std::size_t need = cap - selected.size();
      if (selected.size() + need > shard_size / 2) {
        // Dense fill: walk the complement and partial-shuffle.
        std::vector<std::uint32_t> rest;
        rest.reserve(shard_size - selected.size());
        for (std::uint32_t id = 0; id < shard_size; ++id) {
          if (!scratch.mark[id]) rest.push_back(id);
        }
        for (std::size_t p = 0; p < need; ++p) {
          std::uniform_int_distribution<std::size_t> pick(p, rest.size() - 1);
          std::swap(rest[p], rest[pick(rng)]);
          selected.push_back(rest[p]);
        }
      } else {
        std::uniform_int_distribution<std::uint32_t> pick(0, shard_size - 1);
        while (need > 0) {
          const std::uint32_t id = pick(rng);
          if (scratch.mark[id]) continue;
          scratch.mark[id] = 1;
          selected.push_back(id);
          --need;
        }
      }
    }
  }

  // Restore the mark array (selected covers forced + kept; candidates covers
  // the rest, including reservoir rejects).
  for (std::uint32_t id : selected) scratch.mark[id] = 0;
  for (std::uint32_t id : scratch.candidates) scratch.mark[id] = 0;
  return selected;
}

}  // namespace hashmesh::lsh
