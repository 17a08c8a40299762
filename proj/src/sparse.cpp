#include "hashmesh/sparse.hpp"

#include <stdexcept>

#include "hashmesh/kernels.hpp"

namespace hashmesh {

float sparse_dot(const SparseVector& a, std::span<const float> b) {
  if (a.dim != b.size()) {
    throw std::invalid_argument("sparse_dot: dimension mismatch (" + std::to_string(a.dim) +
                                " vs " + std::to_string(b.size()) + ")");
  }
  return kernels::ops().dot_sparse(a.indices.data(), a.values.data(), a.nnz(), b.data());
}

std::string RecordIssue::to_string() const {
  const char* what = nullptr;
  switch (kind) {
    case RecordViolation::kLengthMismatch: what = "indices/values length mismatch"; break;
    case RecordViolation::kIndexOrder: what = "indices not strictly increasing"; break;
    case RecordViolation::kIndexRange: what = "feature index out of range"; break;
    case RecordViolation::kFeatureDim: what = "feature dimension mismatch"; break;
    case RecordViolation::kLabelRange: what = "label out of range"; break;
  }
  return std::string(what) + " at position " + std::to_string(position);
}

std::optional<RecordIssue> validate_record(const DataRecord& r, std::uint32_t feature_dim,
                                           std::uint32_t label_dim) {
  const SparseVector& f = r.features;
  if (f.indices.size() != f.values.size()) {
    return RecordIssue{RecordViolation::kLengthMismatch,
                       std::min(f.indices.size(), f.values.size())};
  }
  if (f.dim != feature_dim) {
    return RecordIssue{RecordViolation::kFeatureDim, 0};
  }
  for (std::size_t i = 0; i < f.indices.size(); ++i) {
    if (i > 0 && f.indices[i] <= f.indices[i - 1]) {
      return RecordIssue{RecordViolation::kIndexOrder, i};
    }
    if (f.indices[i] >= f.dim) {
      return RecordIssue{RecordViolation::kIndexRange, i};
    }
  }
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    if (r.labels[i] >= label_dim) {
      return RecordIssue{RecordViolation::kLabelRange, i};
    }
  }
  return std::nullopt;
}

}  // namespace hashmesh
