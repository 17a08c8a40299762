#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <variant>
#include <vector>

#include "hashmesh/sparse.hpp"

namespace hashmesh::lsh {

enum class Family : std::uint8_t { kSrp, kDwta };

struct LshConfig {
  Family family = Family::kDwta;
  std::uint32_t hashes_per_table = 6;  // K_h; default 6 for DWTA, 9 for SRP
  std::uint32_t num_tables = 8;        // L_t
  std::uint32_t dwta_bin_size = 8;     // m (DWTA only)
  std::uint64_t seed = 0;

  // Throws ConfigError when parameters are out of range or the bucket id
  // would not fit in 32 bits.
  void validate() const;
  std::uint32_t bucket_bits() const;
};

// Sparse ternary sign planes, entries +1/-1 with probability 1/6 each.
// Generation is a pure function of (seed, table, plane, dim), so every node
// derives identical planes from the same config.
class SrpFamily {
 public:
  SrpFamily(const LshConfig& cfg, std::uint32_t key_dim);

  std::uint32_t hash_dense(std::uint32_t table, std::span<const float> key) const;
  std::uint32_t hash_sparse(std::uint32_t table, const SparseVector& key) const;
  std::uint32_t hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                            std::span<const float> val, std::uint32_t dim) const;

  std::uint32_t key_dim() const { return key_dim_; }
  const LshConfig& config() const { return cfg_; }
  std::span<const std::int8_t> plane(std::uint32_t table, std::uint32_t j) const;

 private:
  LshConfig cfg_;
  std::uint32_t key_dim_;
  std::vector<std::int8_t> planes_;  // [table][plane][dim]
};

// Winner-take-all over random coordinate windows of size m. Windows that see
// no nonzero key coordinate probe the following hash functions in a fixed
// cyclic order (cap: one full cycle), then emit the sentinel code m.
class DwtaFamily {
 public:
  DwtaFamily(const LshConfig& cfg, std::uint32_t key_dim);

  std::uint32_t hash_dense(std::uint32_t table, std::span<const float> key) const;
  std::uint32_t hash_sparse(std::uint32_t table, const SparseVector& key) const;
  std::uint32_t hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                            std::span<const float> val, std::uint32_t dim) const;

  // All tables in one pass over a coordinate -> window reverse index; on
  // highly sparse keys this avoids scanning empty windows per densification
  // probe. Equivalent to per-table hash_sparse (property-tested).
  void hash_all_sparse(std::span<const std::uint32_t> idx, std::span<const float> val,
                       std::uint32_t dim, std::span<std::uint32_t> out_buckets) const;

  std::uint32_t key_dim() const { return key_dim_; }
  const LshConfig& config() const { return cfg_; }
  std::span<const std::uint32_t> window(std::uint32_t table, std::uint32_t j) const;

 private:
  // Returns the winning position of window g, or nullopt when the window
  // holds no nonzero coordinate. Fn: coord -> float.
  template <typename Fn>
  std::optional<std::uint32_t> window_code(std::uint32_t g, Fn&& value_at) const;
  template <typename Fn>
  std::uint32_t hash_impl(std::uint32_t table, Fn&& value_at) const;

  LshConfig cfg_;
  std::uint32_t key_dim_;
  std::uint32_t code_bits_;
  std::vector<std::uint32_t> windows_;      // [table][hash][m]
  std::vector<std::uint32_t> rev_offsets_;  // CSR: coord -> window slots
  std::vector<std::uint32_t> rev_slots_;    // slot = g * m + position
};

class HashFamily {
 public:
  static std::shared_ptr<const HashFamily> create(const LshConfig& cfg, std::uint32_t key_dim);

  std::uint32_t hash_dense(std::uint32_t table, std::span<const float> key) const;
  std::uint32_t hash_sparse(std::uint32_t table, const SparseVector& key) const;
  std::uint32_t hash_sparse(std::uint32_t table, std::span<const std::uint32_t> idx,
                            std::span<const float> val, std::uint32_t dim) const;
  // Buckets for every table at once (the query path).
  void hash_all_sparse(std::span<const std::uint32_t> idx, std::span<const float> val,
                       std::uint32_t dim, std::span<std::uint32_t> out_buckets) const;

  const LshConfig& config() const;
  std::uint32_t key_dim() const;

 private:
  explicit HashFamily(std::variant<SrpFamily, DwtaFamily> impl) : impl_(std::move(impl)) {}
  std::variant<SrpFamily, DwtaFamily> impl_;
};

// Spec-level hash entry points (validate the key dimension).
std::uint32_t srp_hash(const SrpFamily& family, std::uint32_t table, const SparseVector& key);
std::uint32_t dwta_hash(const DwtaFamily& family, std::uint32_t table, const SparseVector& key);

enum class FillPolicy : std::uint8_t { kUniformFill, kStopEarly };

struct SelectionPolicy {
  std::uint32_t budget = 1;  // per shard, per sample
  FillPolicy fill = FillPolicy::kUniformFill;
  std::uint64_t rng_seed = 0;

  void validate() const;  // budget >= 1
};

// Multi-table index over one shard's neuron weight vectors. Local ids are
// shard-relative. Read-only after build; rebuilds produce a replacement that
// the owner swaps in at a batch boundary.
class LshIndex {
 public:
  LshIndex() = default;

  std::uint32_t num_tables() const { return static_cast<std::uint32_t>(tables_.size()); }
  std::uint32_t local_count() const { return local_count_; }
  std::uint32_t owner_shard() const { return owner_shard_; }
  const HashFamily& family() const { return *family_; }
  const std::shared_ptr<const HashFamily>& family_ptr() const { return family_; }

  std::span<const std::uint32_t> bucket(std::uint32_t table, std::uint32_t bucket_id) const;

  struct TableStats {
    std::uint64_t code_space;  // 2^bucket_bits
    std::uint32_t nonempty_buckets;
    std::uint32_t max_bucket;
    double empty_fraction;
    std::unordered_map<std::uint32_t, std::uint32_t> size_histogram;  // bucket size -> count
  };
  TableStats table_stats(std::uint32_t table) const;

  friend LshIndex build_index(std::shared_ptr<const HashFamily> family, const float* weights,
                              std::size_t stride, std::uint32_t local_count,
                              std::uint32_t owner_shard);

 private:
  using Table = std::unordered_map<std::uint32_t, std::vector<std::uint32_t>>;
  std::shared_ptr<const HashFamily> family_;
  std::vector<Table> tables_;
  std::uint32_t local_count_ = 0;
  std::uint32_t owner_shard_ = 0;
};

// Hashes every weight row (weights + stride*j, length = family key_dim) into
// all tables. Deterministic given (family, weights).
LshIndex build_index(std::shared_ptr<const HashFamily> family, const float* weights,
                     std::size_t stride, std::uint32_t local_count, std::uint32_t owner_shard);

// Same tables from fresh hash functions when new_seed is given, identical
// functions otherwise. The old index is left untouched.
LshIndex rebuild(const LshIndex& index, const float* weights, std::size_t stride,
                 std::optional<std::uint64_t> new_seed);

// Classic reservoir (algorithm R): every stream element is included with
// probability exactly k/|stream|.
std::vector<std::uint32_t> reservoir_sample(std::span<const std::uint32_t> stream, std::size_t k,
                                            std::mt19937_64& rng);

// Budgeted active-neuron selection. Candidates are the union of matching
// bucket contents over all tables; reservoir sampling trims overfull
// candidate sets, UNIFORM_FILL tops up short ones from the shard's
// non-candidates. forced_local ids (deduplicated, any order) are always
// included and count against the budget. Returns unsorted distinct ids.
std::vector<std::uint32_t> select_active(const LshIndex& index, const SparseVector& query,
                                         const SelectionPolicy& policy, std::mt19937_64& rng,
                                         std::span<const std::uint32_t> forced_local = {});
std::vector<std::uint32_t> select_active(const LshIndex& index,
                                         std::span<const std::uint32_t> query_idx,
                                         std::span<const float> query_val, std::uint32_t dim,
                                         const SelectionPolicy& policy, std::mt19937_64& rng,
                                         std::span<const std::uint32_t> forced_local = {});

}  // namespace hashmesh::lsh
