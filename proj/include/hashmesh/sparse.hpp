#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hashmesh {

// Index/value pairs for one sparse input or activation slice. Indices are
// kept strictly increasing; treat instances as immutable once built.
struct SparseVector {
  std::vector<std::uint32_t> indices;
  std::vector<float> values;
  std::uint32_t dim = 0;

  std::size_t nnz() const { return indices.size(); }
};

struct DataRecord {
  SparseVector features;
  std::vector<std::uint32_t> labels;
};

// A batch references records owned by the dataset; the engine never copies
// feature data per step.
struct Batch {
  std::vector<const DataRecord*> records;

  std::size_t size() const { return records.size(); }
  const DataRecord& operator[](std::size_t i) const { return *records[i]; }
};

// Unified view the compute kernels consume: either explicit coordinates or a
// contiguous [0, nnz) span (idx == nullptr), which lets full-width inputs use
// the dense dot path.
struct InputView {
  const std::uint32_t* idx = nullptr;
  const float* val = nullptr;
  std::uint32_t nnz = 0;
  std::uint32_t dim = 0;

  bool contiguous() const { return idx == nullptr; }

  static InputView of(const SparseVector& v) {
    return {v.indices.data(), v.values.data(), static_cast<std::uint32_t>(v.nnz()), v.dim};
  }
  static InputView sparse(std::span<const std::uint32_t> ids, std::span<const float> vals,
                          std::uint32_t dim) {
    return {ids.data(), vals.data(), static_cast<std::uint32_t>(ids.size()), dim};
  }
  static InputView dense(std::span<const float> vals) {
    return {nullptr, vals.data(), static_cast<std::uint32_t>(vals.size()),
            static_cast<std::uint32_t>(vals.size())};
  }
};

// sum_i a.values[i] * b[a.indices[i]]. Throws std::invalid_argument on
// dimension mismatch.
float sparse_dot(const SparseVector& a, std::span<const float> b);

enum class RecordViolation {
  kLengthMismatch,   // indices/values length differ
  kIndexOrder,       // indices not strictly increasing
  kIndexRange,       // index >= dim
  kFeatureDim,       // features.dim != expected feature_dim
  kLabelRange,       // label >= label_dim
};

struct RecordIssue {
  RecordViolation kind;
  std::size_t position;  // offending index/label slot

  std::string to_string() const;
};

// nullopt means the record satisfies every invariant. Reports the first
// violation found together with its position.
std::optional<RecordIssue> validate_record(const DataRecord& r, std::uint32_t feature_dim,
                                           std::uint32_t label_dim);

}  // namespace hashmesh
