#pragma once

#include <random>
#include <vector>

#include "hashmesh/dataset.hpp"
#include "hashmesh/engine.hpp"
#include "hashmesh/sparse.hpp"

namespace testutil {

inline hashmesh::SparseVector sv(std::vector<std::uint32_t> idx, std::vector<float> val,
                                 std::uint32_t dim) {
  hashmesh::SparseVector v;
  v.indices = std::move(idx);
  v.values = std::move(val);
  v.dim = dim;
  return v;
}

// Records with fully dense features (every coordinate nonzero), so sparse
// and dense update paths touch identical weight sets.
inline hashmesh::DatasetHandle dense_random_dataset(std::size_t n, std::uint32_t feature_dim,
                                                    std::uint32_t label_dim, std::uint64_t seed,
                                                    std::uint32_t labels_per_record = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> label(0, label_dim - 1);
  std::vector<hashmesh::DataRecord> records(n);
  for (auto& rec : records) {
    rec.features.dim = feature_dim;
    for (std::uint32_t i = 0; i < feature_dim; ++i) {
      rec.features.indices.push_back(i);
      float v = unit(rng);
      if (v == 0.0f) v = 0.5f;
      rec.features.values.push_back(v);
    }
    for (std::uint32_t l = 0; l < labels_per_record; ++l) {
      rec.labels.push_back(label(rng));
    }
    std::sort(rec.labels.begin(), rec.labels.end());
    rec.labels.erase(std::unique(rec.labels.begin(), rec.labels.end()), rec.labels.end());
  }
  hashmesh::DatasetHeader header{n, feature_dim, label_dim};
  return hashmesh::DatasetHandle::from_records(header, std::move(records));
}

// Sparse random records (a handful of nonzero coordinates each).
inline hashmesh::DatasetHandle sparse_random_dataset(std::size_t n, std::uint32_t feature_dim,
                                                     std::uint32_t label_dim, std::uint32_t nnz,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> coord(0, feature_dim - 1);
  std::uniform_int_distribution<std::uint32_t> label(0, label_dim - 1);
  std::vector<hashmesh::DataRecord> records(n);
  for (auto& rec : records) {
    rec.features.dim = feature_dim;
    std::vector<std::uint32_t> idx;
    while (idx.size() < nnz) {
      const std::uint32_t c = coord(rng);
      if (std::find(idx.begin(), idx.end(), c) == idx.end()) idx.push_back(c);
    }
    std::sort(idx.begin(), idx.end());
    for (std::uint32_t c : idx) {
      rec.features.indices.push_back(c);
      float v = unit(rng);
      if (v == 0.0f) v = 0.5f;
      rec.features.values.push_back(v);
    }
    rec.labels.push_back(label(rng));
  }
  hashmesh::DatasetHeader header{n, feature_dim, label_dim};
  return hashmesh::DatasetHandle::from_records(header, std::move(records));
}

inline double rel_diff(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-12});
  return std::fabs(a - b) / denom;
}

}  // namespace testutil
